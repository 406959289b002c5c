//! Training loop, scoring, evaluation, and the cross-dataset / k-fold
//! protocol harnesses.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{load_image, ManifestEntry};
use crate::error::{Error, MetricsError, TrainError};
use crate::graph::Graph;
use crate::loss::{combined_loss_graph, make_pairs, stack_scalars, PairStrategy};
use crate::metrics::{
    choose_threshold, det_curve, kfold_split, DetCurve, Label, MetricsReport, ScoredSample,
    ThresholdPolicy,
};
use crate::model::{model_forward, Model, RunConfig};
use crate::optim::{adam_step, lr_schedule, AdamState};
use crate::params::ModelCtx;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub train_accuracy: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: Vec<EpochLog>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub steps: u64,
    pub epochs_run: usize,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15))
}

/// Deterministic batched index order for one epoch; a trailing singleton is
/// folded into the previous batch so contrastive pairing always sees >= 2.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Train on a manifest, writing `model.ckpt` and `train_log.csv` into
/// `out_dir`. `resume` continues the step counter from a saved checkpoint.
pub fn train(
    config: &RunConfig,
    entries: &[ManifestEntry],
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome, Error> {
    config.validate().map_err(Error::Config)?;
    if entries.is_empty() {
        return Err(TrainError::EmptyManifest.into());
    }
    let labels: Vec<u8> = entries.iter().map(|e| e.class_label()).collect();
    if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
        return Err(TrainError::SingleClassManifest.into());
    }
    fs::create_dir_all(out_dir).map_err(TrainError::Io)?;

    let images: Vec<Tensor<f32>> = entries
        .iter()
        .map(|e| load_image(&e.path, config.encoder.image_size))
        .collect::<Result<_, _>>()
        .map_err(Error::Data)?;

    let (mut model, start_step) = match resume {
        Some(path) => Model::load(path)?,
        None => (
            Model::init(config.clone(), config.train.seed).map_err(Error::Config)?,
            0,
        ),
    };
    let hooks = model.hooks();
    let mut adam = AdamState::new(&model.params);
    adam.step = start_step;

    let n = entries.len();
    let batches_per_epoch = n.div_ceil(config.train.batch_size);
    let total_steps = (config.train.epochs * batches_per_epoch) as u64 + start_step;
    let warmup = ((total_steps as f64) * config.optim.warmup_frac).round() as u64;

    let mut log = Vec::new();
    let mut initial_loss = None;
    let mut final_loss = 0.0;
    let mut final_accuracy = 0.0;
    let mut epochs_run = 0;
    let mut global_step = start_step;

    'epochs: for epoch in 0..config.train.epochs {
        let mut rng = epoch_rng(config.train.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_hits = 0usize;
        let mut epoch_samples = 0usize;
        let mut lr_now = 0.0;
        for batch in epoch_batches(n, config.train.batch_size, &mut rng) {
            let mut g = Graph::<f32>::new();
            let mut cx = ModelCtx::new(&mut g, &model.params);
            let mut prob_vars = Vec::with_capacity(batch.len());
            let mut emb_vars = Vec::with_capacity(batch.len());
            let mut batch_labels = Vec::with_capacity(batch.len());
            for &i in &batch {
                let img = cx.g.leaf(images[i].clone());
                let out = model_forward(&mut cx, img, &model.structure, &model.config)
                    .map_err(Error::Tensor)?;
                prob_vars.push(out.probability);
                emb_vars.push(out.embedding);
                batch_labels.push(labels[i]);
            }
            let yhat = stack_scalars(cx.g, &prob_vars).map_err(Error::Tensor)?;
            let pairs = make_pairs(&batch_labels, PairStrategy::default(), global_step);
            let loss = combined_loss_graph(
                cx.g,
                &batch_labels,
                yhat,
                &emb_vars,
                &pairs,
                &config.focal,
                &config.contrastive,
            )
            .map_err(Error::Tensor)?;

            let probs: Vec<f64> = prob_vars
                .iter()
                .map(|&p| cx.g.value(p).item().as_f64())
                .collect();
            let loss_val = cx.g.value(loss).item().as_f64();
            if !loss_val.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step: global_step,
                    epoch,
                    indices: batch.clone(),
                    probs,
                }
                .into());
            }
            let registered = cx.registered();
            g.backward(loss).map_err(Error::Tensor)?;
            let grads: Vec<_> = registered
                .into_iter()
                .filter_map(|(id, var)| g.grad(var).map(|t| (id, t.clone())))
                .collect();
            lr_now = lr_schedule(global_step, total_steps, config.optim.lr, warmup);
            adam_step(&mut model.params, &grads, &mut adam, lr_now, &config.optim, &hooks)
                .map_err(Error::Train)?;
            global_step += 1;

            if initial_loss.is_none() {
                initial_loss = Some(loss_val);
            }
            final_loss = loss_val;
            epoch_loss += loss_val * batch.len() as f64;
            epoch_samples += batch.len();
            epoch_hits += probs
                .iter()
                .zip(&batch_labels)
                .filter(|(&p, &y)| (p >= 0.5) == (y == 1))
                .count();
        }
        let mean_loss = epoch_loss / epoch_samples as f64;
        let batch_accuracy = epoch_hits as f64 / epoch_samples as f64;
        log.push(EpochLog {
            epoch,
            mean_loss,
            lr: lr_now,
            train_accuracy: batch_accuracy,
        });
        epochs_run = epoch + 1;
        final_accuracy = batch_accuracy;

        let init = initial_loss.expect("at least one step ran");
        if batch_accuracy >= 1.0 && mean_loss < 0.1 * init {
            // confirm on a clean inference pass over the full train set
            let confirmed = entries
                .iter()
                .zip(&images)
                .map(|(e, img)| {
                    let (p, _) = model.forward(img)?;
                    Ok::<bool, crate::error::TensorError>((p >= 0.5) == (e.class_label() == 1))
                })
                .collect::<Result<Vec<bool>, _>>()
                .map_err(Error::Tensor)?;
            if confirmed.iter().all(|&ok| ok) {
                final_accuracy = 1.0;
                final_loss = mean_loss;
                break 'epochs;
            }
        }
    }

    let log_path = out_dir.join("train_log.csv");
    let mut csv = String::from("epoch,mean_loss,lr,train_accuracy\n");
    for l in &log {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            l.epoch, l.mean_loss, l.lr, l.train_accuracy
        ));
    }
    fs::write(&log_path, csv).map_err(TrainError::Io)?;

    let ckpt = out_dir.join("model.ckpt");
    model.save(&ckpt, global_step).map_err(Error::Checkpoint)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log,
        initial_loss: initial_loss.unwrap_or(0.0),
        final_loss,
        final_accuracy,
        steps: global_step,
        epochs_run,
    })
}

/// Score every manifest entry with the model (parallel across samples,
/// collected in manifest order).
pub fn score_entries(model: &Model, entries: &[ManifestEntry]) -> Result<Vec<ScoredSample>, Error> {
    entries
        .par_iter()
        .map(|e| {
            let img = load_image(&e.path, model.config.encoder.image_size).map_err(Error::Data)?;
            let (p, _) = model.forward(&img).map_err(Error::Tensor)?;
            ScoredSample::new(p.clamp(0.0, 1.0), e.label, e.pai_type.clone(), e.dataset_id.clone())
                .map_err(Error::Metrics)
        })
        .collect()
}

/// Score, choose the operating threshold by policy, and report. When
/// `report_dir` is given, writes `report.json`, `report.txt`, and
/// `det_curve.csv`.
pub fn evaluate(
    model: &Model,
    entries: &[ManifestEntry],
    policy: ThresholdPolicy,
    report_dir: Option<&Path>,
) -> Result<(MetricsReport, DetCurve), Error> {
    let scores = score_entries(model, entries)?;
    let threshold = choose_threshold(&scores, policy).map_err(Error::Metrics)?;
    let report = MetricsReport::compute(&scores, threshold).map_err(Error::Metrics)?;
    let curve = det_curve(&scores, 200).map_err(Error::Metrics)?;
    if let Some(dir) = report_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), report.to_json())?;
        fs::write(dir.join("report.txt"), report.to_text_table())?;
        fs::write(dir.join("det_curve.csv"), curve.to_csv())?;
    }
    Ok((report, curve))
}

/// Train on one dataset, pick the threshold on a held-out stratified slice
/// of it, and evaluate on a disjoint dataset. Overlapping dataset ids are
/// refused.
pub fn cross_dataset_eval(
    config: &RunConfig,
    train_entries: &[ManifestEntry],
    test_entries: &[ManifestEntry],
    policy: ThresholdPolicy,
    out_dir: &Path,
) -> Result<MetricsReport, Error> {
    let train_ids: BTreeSet<&str> = train_entries.iter().map(|e| e.dataset_id.as_str()).collect();
    let test_ids: BTreeSet<&str> = test_entries.iter().map(|e| e.dataset_id.as_str()).collect();
    let overlap: Vec<String> = train_ids
        .intersection(&test_ids)
        .map(|s| s.to_string())
        .collect();
    if !overlap.is_empty() {
        return Err(MetricsError::OverlappingDatasets(overlap).into());
    }

    // hold out a stratified validation slice (1 of 5 folds) for the threshold
    let labels: Vec<Label> = train_entries.iter().map(|e| e.label).collect();
    let folds = kfold_split(&labels, 5, config.train.seed).map_err(Error::Metrics)?;
    let val_idx = &folds.folds[0];
    let fit_idx = folds.complement(0);
    let fit: Vec<ManifestEntry> = fit_idx.iter().map(|&i| train_entries[i].clone()).collect();
    let val: Vec<ManifestEntry> = val_idx.iter().map(|&i| train_entries[i].clone()).collect();

    let outcome = train(config, &fit, out_dir, None)?;
    let (model, _) = Model::load(&outcome.checkpoint)?;
    let val_scores = score_entries(&model, &val)?;
    let threshold = choose_threshold(&val_scores, policy).map_err(Error::Metrics)?;

    let test_scores = score_entries(&model, test_entries)?;
    let report = MetricsReport::compute(&test_scores, threshold).map_err(Error::Metrics)?;
    fs::write(out_dir.join("cross_dataset_report.json"), report.to_json())?;
    Ok(report)
}

/// k-fold protocol: train on the complement of each fold, evaluate on the
/// fold. Returns one report per fold; writes per-fold and summary files.
pub fn kfold_protocol(
    config: &RunConfig,
    entries: &[ManifestEntry],
    k: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<MetricsReport>, Error> {
    let labels: Vec<Label> = entries.iter().map(|e| e.label).collect();
    let spec = kfold_split(&labels, k, seed).map_err(Error::Metrics)?;
    let policy: ThresholdPolicy = config
        .eval
        .threshold_policy
        .parse()
        .map_err(Error::Metrics)?;
    let mut reports = Vec::with_capacity(k);
    for fold in 0..k {
        let fold_dir = out_dir.join(format!("fold{fold}"));
        let fit: Vec<ManifestEntry> = spec
            .complement(fold)
            .into_iter()
            .map(|i| entries[i].clone())
            .collect();
        let held: Vec<ManifestEntry> = spec.folds[fold].iter().map(|&i| entries[i].clone()).collect();
        let outcome = train(config, &fit, &fold_dir, None)?;
        let (model, _) = Model::load(&outcome.checkpoint)?;
        let (report, _) = evaluate(&model, &held, policy, Some(&fold_dir))?;
        reports.push(report);
    }
    let mean_acer = reports.iter().map(|r| r.acer).sum::<f64>() / reports.len() as f64;
    let summary = serde_json::json!({
        "k": k,
        "seed": seed,
        "per_fold_acer": reports.iter().map(|r| r.acer).collect::<Vec<_>>(),
        "mean_acer": mean_acer,
    });
    fs::write(
        out_dir.join("kfold_summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(reports)
}
