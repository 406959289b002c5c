//! Focal loss (two variants), margin contrastive loss, their weighted
//! combination, and deterministic in-batch pairing.
//!
//! Each loss exists twice on purpose: a plain scalar evaluation (the public
//! reference route) and a graph version used for training. Tests hold the
//! two routes together against independently derived values.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

pub const PROB_CLAMP: f64 = 1e-7;

/// Negative-class weighting of the focal loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FocalVariant {
    /// `(1 - alpha*yhat)^gamma` on the negative class (the default form).
    #[default]
    GruAunet,
    /// Conventional form: `(1 - alpha) * yhat^gamma` on the negative class.
    Standard,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
    #[serde(default)]
    pub variant: FocalVariant,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            variant: FocalVariant::GruAunet,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<(), crate::error::ConfigError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(crate::error::ConfigError::Invalid(format!(
                "focal alpha {} outside (0,1)",
                self.alpha
            )));
        }
        if self.gamma < 0.0 {
            return Err(crate::error::ConfigError::Invalid(format!(
                "focal gamma {} must be >= 0",
                self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub margin: f64,
    pub lambda: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            lambda: 0.5,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), crate::error::ConfigError> {
        if self.margin <= 0.0 {
            return Err(crate::error::ConfigError::Invalid(format!(
                "contrastive margin {} must be > 0",
                self.margin
            )));
        }
        if self.lambda < 0.0 {
            return Err(crate::error::ConfigError::Invalid(format!(
                "lambda {} must be >= 0",
                self.lambda
            )));
        }
        Ok(())
    }
}

fn check_batch(y: &[u8], yhat: &[f64]) -> Result<(), TensorError> {
    if y.is_empty() || y.len() != yhat.len() {
        return Err(TensorError::InvalidShape {
            shape: vec![y.len()],
            reason: format!("focal batch: {} labels vs {} predictions", y.len(), yhat.len()),
        });
    }
    if let Some(&bad) = yhat.iter().find(|p| !(0.0..=1.0).contains(*p) || !p.is_finite()) {
        return Err(TensorError::InvalidShape {
            shape: vec![yhat.len()],
            reason: format!("probability {bad} outside [0,1]"),
        });
    }
    Ok(())
}

/// Scalar focal loss:
/// `-(1/N) sum[alpha (1-p)^g y ln p + (1-y) W(p) ln(1-p)]` with the
/// negative-class weight `W` chosen by the variant. Probabilities are
/// clamped to `[1e-7, 1-1e-7]` before the logs.
pub fn focal_loss(y: &[u8], yhat: &[f64], cfg: &FocalConfig) -> Result<f64, TensorError> {
    check_batch(y, yhat)?;
    let n = y.len() as f64;
    let mut acc = 0.0;
    for (&yi, &p) in y.iter().zip(yhat) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        if yi == 1 {
            acc += cfg.alpha * (1.0 - p).powf(cfg.gamma) * p.ln();
        } else {
            let w = match cfg.variant {
                FocalVariant::GruAunet => (1.0 - cfg.alpha * p).powf(cfg.gamma),
                FocalVariant::Standard => (1.0 - cfg.alpha) * p.powf(cfg.gamma),
            };
            acc += w * (1.0 - p).ln();
        }
    }
    Ok(-acc / n)
}

/// Graph focal loss over a probability vector `[N]`.
pub fn focal_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    y: &[u8],
    yhat: Var,
    cfg: &FocalConfig,
) -> Result<Var, TensorError> {
    let n = y.len();
    if n == 0 || g.shape(yhat) != [n] {
        return Err(TensorError::InvalidShape {
            shape: g.shape(yhat).to_vec(),
            reason: format!("focal_loss_graph expects [{n}] probabilities"),
        });
    }
    let p = g.clamp(yhat, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = g.one_minus(p);
    let ln_p = g.ln(p);
    let ln_q = g.ln(q);
    let yv = g.constant(Tensor::from_fn(&[n], |i| {
        T::from_f64(f64::from(y[i]))
    }));
    let not_y = g.one_minus(yv);

    let pos_w = g.powf(q, cfg.gamma);
    let pos = g.mul(yv, pos_w)?;
    let pos = g.mul(pos, ln_p)?;
    let pos = g.scale(pos, cfg.alpha);

    let neg_w = match cfg.variant {
        FocalVariant::GruAunet => {
            let ap = g.scale(p, cfg.alpha);
            let one_minus_ap = g.one_minus(ap);
            g.powf(one_minus_ap, cfg.gamma)
        }
        FocalVariant::Standard => {
            let pg = g.powf(p, cfg.gamma);
            g.scale(pg, 1.0 - cfg.alpha)
        }
    };
    let neg = g.mul(not_y, neg_w)?;
    let neg = g.mul(neg, ln_q)?;

    let total = g.add(pos, neg)?;
    let mean = g.mean_all(total)?;
    Ok(g.scale(mean, -1.0))
}

/// An in-batch pair: indices into the embedding batch plus the pair label
/// `s` (`similar == true` means same class).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub similar: bool,
}

/// Pairs with their Euclidean embedding distances, the input of the scalar
/// contrastive loss.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
    pub distances: Vec<f64>,
}

impl PairBatch {
    pub fn from_embeddings(pairs: Vec<Pair>, embeddings: &[Vec<f64>]) -> Self {
        let distances = pairs
            .iter()
            .map(|p| {
                embeddings[p.a]
                    .iter()
                    .zip(&embeddings[p.b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Self { pairs, distances }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Scalar contrastive loss, exactly
/// `(1/2N) sum[s * d^2/2 + (1-s) * max(0, m-d)^2 / 2]`.
pub fn contrastive_loss(batch: &PairBatch, cfg: &ContrastiveConfig) -> Result<f64, TensorError> {
    if batch.is_empty() {
        return Err(TensorError::InvalidShape {
            shape: vec![0],
            reason: "contrastive loss needs at least one pair".into(),
        });
    }
    let mut acc = 0.0;
    for (p, &d) in batch.pairs.iter().zip(&batch.distances) {
        if p.similar {
            acc += 0.5 * d * d;
        } else {
            let hinge = (cfg.margin - d).max(0.0);
            acc += 0.5 * hinge * hinge;
        }
    }
    Ok(acc / (2.0 * batch.len() as f64))
}

/// Graph contrastive loss over per-sample embedding nodes.
pub fn contrastive_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    embeddings: &[Var],
    pairs: &[Pair],
    margin: f64,
) -> Result<Var, TensorError> {
    if pairs.is_empty() {
        return Err(TensorError::InvalidShape {
            shape: vec![0],
            reason: "contrastive loss needs at least one pair".into(),
        });
    }
    let mut total: Option<Var> = None;
    for p in pairs {
        let diff = g.sub(embeddings[p.a], embeddings[p.b])?;
        let sq = g.mul(diff, diff)?;
        let sumsq = g.sum_all(sq)?;
        let term = if p.similar {
            g.scale(sumsq, 0.5)
        } else {
            // d = sqrt(sumsq) floored away from zero so the derivative stays
            // finite when two embeddings coincide
            let floored = g.clamp_min(sumsq, 1e-24);
            let d = g.sqrt(floored);
            let neg_d = g.neg(d);
            let gap = g.add_scalar(neg_d, margin);
            let hinge = g.relu(gap);
            let hsq = g.mul(hinge, hinge)?;
            g.scale(hsq, 0.5)
        };
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(g.scale(total.expect("non-empty"), 1.0 / (2.0 * pairs.len() as f64)))
}

/// `L = L_focal + lambda * L_contrastive`. Empty pairs are only permitted
/// when `lambda == 0`.
pub fn combined_loss(
    y: &[u8],
    yhat: &[f64],
    batch: &PairBatch,
    fcfg: &FocalConfig,
    ccfg: &ContrastiveConfig,
) -> Result<f64, TensorError> {
    let f = focal_loss(y, yhat, fcfg)?;
    if ccfg.lambda == 0.0 {
        return Ok(f);
    }
    Ok(f + ccfg.lambda * contrastive_loss(batch, ccfg)?)
}

/// Graph combination; gradients flow to both the probabilities and the
/// embeddings.
pub fn combined_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    y: &[u8],
    yhat: Var,
    embeddings: &[Var],
    pairs: &[Pair],
    fcfg: &FocalConfig,
    ccfg: &ContrastiveConfig,
) -> Result<Var, TensorError> {
    let f = focal_loss_graph(g, y, yhat, fcfg)?;
    if ccfg.lambda == 0.0 {
        return Ok(f);
    }
    let c = contrastive_loss_graph(g, embeddings, pairs, ccfg.margin)?;
    let scaled = g.scale(c, ccfg.lambda);
    g.add(f, scaled)
}

/// Stack rank-0 scalars into a `[N]` vector node.
pub fn stack_scalars<T: Scalar>(g: &mut Graph<T>, scalars: &[Var]) -> Result<Var, TensorError> {
    let ones: Vec<Var> = scalars
        .iter()
        .map(|&s| g.reshape(s, vec![1]))
        .collect::<Result<_, _>>()?;
    g.concat(&ones, 0)
}

/// Pairing strategy. The default enumerates all within-batch pairs, then
/// keeps a seeded, 50/50-balanced subset of up to `cap`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairStrategy {
    Balanced { cap: usize },
    All,
}

impl Default for PairStrategy {
    fn default() -> Self {
        PairStrategy::Balanced { cap: 32 }
    }
}

/// Deterministic in-batch pairing from class labels (0 bonafide, 1 attack).
/// A single-class batch under the balanced strategy logs a warning and
/// falls back to the unbalanced (all-similar) set.
pub fn make_pairs(labels: &[u8], strategy: PairStrategy, seed: u64) -> Vec<Pair> {
    let mut similar = Vec::new();
    let mut dissimilar = Vec::new();
    for a in 0..labels.len() {
        for b in (a + 1)..labels.len() {
            let pair = Pair {
                a,
                b,
                similar: labels[a] == labels[b],
            };
            if pair.similar {
                similar.push(pair);
            } else {
                dissimilar.push(pair);
            }
        }
    }
    match strategy {
        PairStrategy::All => {
            let mut all = similar;
            all.extend(dissimilar);
            all
        }
        PairStrategy::Balanced { cap } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            similar.shuffle(&mut rng);
            dissimilar.shuffle(&mut rng);
            if dissimilar.is_empty() || similar.is_empty() {
                if dissimilar.is_empty() {
                    log::warn!(
                        "make_pairs: single-class batch, falling back to unbalanced pairing"
                    );
                }
                let mut all = similar;
                all.extend(dissimilar);
                all.truncate(cap);
                return all;
            }
            let total = (similar.len() + dissimilar.len()).min(cap);
            let mut take_sim = (cap / 2).min(similar.len());
            let take_dis = (total - take_sim).min(dissimilar.len());
            take_sim = (total - take_dis).min(similar.len());
            let mut out = similar[..take_sim].to_vec();
            out.extend_from_slice(&dissimilar[..take_dis]);
            out
        }
    }
}

/// Pairing plus distance computation, the full spec surface.
pub fn make_pair_batch(
    embeddings: &[Vec<f64>],
    labels: &[u8],
    strategy: PairStrategy,
    seed: u64,
) -> PairBatch {
    let pairs = make_pairs(labels, strategy, seed);
    PairBatch::from_embeddings(pairs, embeddings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> FocalConfig {
        FocalConfig::default()
    }

    #[test]
    fn worked_focal_values() {
        // y=1, p=0.5: 0.25 * 0.25 * ln 2 = 0.0433216...
        let l = focal_loss(&[1], &[0.5], &cfg()).unwrap();
        assert!((l - 0.04332).abs() < 5e-6, "{l}");
        // y=0, p=0.5: (1 - 0.125)^2 * ln 2 = 0.5306907...
        let l = focal_loss(&[0], &[0.5], &cfg()).unwrap();
        assert!((l - 0.53069).abs() < 5e-6, "{l}");
        // perfect prediction limit
        let l = focal_loss(&[1], &[1.0], &cfg()).unwrap();
        assert!(l.abs() < 1e-12, "{l}");
    }

    #[test]
    fn focal_graph_matches_scalar_route() {
        let y = [1u8, 0, 1, 0, 0];
        let p = [0.9, 0.2, 0.4, 0.75, 0.01];
        for variant in [FocalVariant::GruAunet, FocalVariant::Standard] {
            let c = FocalConfig {
                variant,
                ..FocalConfig::default()
            };
            let scalar = focal_loss(&y, &p, &c).unwrap();
            let mut g = Graph::<f64>::new();
            let pv = g.leaf(Tensor::new(vec![5], p.to_vec()).unwrap());
            let lv = focal_loss_graph(&mut g, &y, pv, &c).unwrap();
            assert!((g.value(lv).item() - scalar).abs() < 1e-14);
        }
    }

    #[test]
    fn focal_rejects_bad_batches() {
        assert!(focal_loss(&[], &[], &cfg()).is_err());
        assert!(focal_loss(&[1], &[1.5], &cfg()).is_err());
        assert!(focal_loss(&[1, 0], &[0.5], &cfg()).is_err());
    }

    #[test]
    fn focal_monotone_decreasing_for_positive_label() {
        let mut prev = f64::INFINITY;
        for i in 1..40 {
            let p = i as f64 / 40.0;
            let l = focal_loss(&[1], &[p], &cfg()).unwrap();
            assert!(l < prev, "focal loss must strictly decrease in p for y=1");
            prev = l;
        }
    }

    #[test]
    fn worked_contrastive_values() {
        let c = ContrastiveConfig::default();
        // similar pair, d = 1.2: (1/2) * (0.5 * 1.44) = 0.36
        let b = PairBatch {
            pairs: vec![Pair { a: 0, b: 1, similar: true }],
            distances: vec![1.2],
        };
        assert!((contrastive_loss(&b, &c).unwrap() - 0.36).abs() < 1e-12);
        // dissimilar pair, d = 0.5, m = 1: (1/2) * (0.5 * 0.25) = 0.0625
        let b = PairBatch {
            pairs: vec![Pair { a: 0, b: 1, similar: false }],
            distances: vec![0.5],
        };
        assert!((contrastive_loss(&b, &c).unwrap() - 0.0625).abs() < 1e-12);
        // dissimilar beyond margin contributes zero
        let b = PairBatch {
            pairs: vec![Pair { a: 0, b: 1, similar: false }],
            distances: vec![1.7],
        };
        assert_eq!(contrastive_loss(&b, &c).unwrap(), 0.0);
        // empty batch is an error
        let b = PairBatch { pairs: vec![], distances: vec![] };
        assert!(contrastive_loss(&b, &c).is_err());
    }

    #[test]
    fn contrastive_graph_matches_scalar_route() {
        let e0 = vec![0.0, 0.1, -0.4];
        let e1 = vec![0.6, -0.2, 0.3];
        let e2 = vec![0.55, -0.15, 0.28];
        let embeddings = vec![e0.clone(), e1.clone(), e2.clone()];
        let pairs = vec![
            Pair { a: 0, b: 1, similar: false },
            Pair { a: 1, b: 2, similar: true },
        ];
        let scalar = contrastive_loss(
            &PairBatch::from_embeddings(pairs.clone(), &embeddings),
            &ContrastiveConfig::default(),
        )
        .unwrap();

        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = embeddings
            .iter()
            .map(|e| g.leaf(Tensor::new(vec![3], e.clone()).unwrap()))
            .collect();
        let lv = contrastive_loss_graph(&mut g, &vars, &pairs, 1.0).unwrap();
        assert!((g.value(lv).item() - scalar).abs() < 1e-12);
    }

    #[test]
    fn combined_degenerates_to_focal_at_lambda_zero() {
        let y = [1u8, 0];
        let p = [0.7, 0.3];
        let empty = PairBatch { pairs: vec![], distances: vec![] };
        let ccfg = ContrastiveConfig { margin: 1.0, lambda: 0.0 };
        let c = combined_loss(&y, &p, &empty, &cfg(), &ccfg).unwrap();
        assert_eq!(c, focal_loss(&y, &p, &cfg()).unwrap());
    }

    #[test]
    fn combined_is_affine_in_lambda() {
        let y = [1u8, 0, 0, 1];
        let p = [0.6, 0.45, 0.2, 0.8];
        let embeddings = vec![
            vec![0.1, 0.2],
            vec![-0.4, 0.6],
            vec![0.0, -0.3],
            vec![0.15, 0.22],
        ];
        let pairs = make_pairs(&[1, 0, 0, 1], PairStrategy::All, 0);
        let batch = PairBatch::from_embeddings(pairs, &embeddings);
        let at = |lambda: f64| {
            combined_loss(
                &y,
                &p,
                &batch,
                &cfg(),
                &ContrastiveConfig { margin: 1.0, lambda },
            )
            .unwrap()
        };
        let (l0, l1, l2) = (at(0.0), at(1.0), at(2.0));
        let contrast = contrastive_loss(&batch, &ContrastiveConfig::default()).unwrap();
        assert!((l1 - l0 - contrast).abs() < 1e-12);
        assert!((l2 - 2.0 * l1 + l0).abs() < 1e-12, "affine in lambda");
    }

    #[test]
    fn tiny_batches_pair_exhaustively() {
        let p = make_pairs(&[0, 0], PairStrategy::default(), 1);
        assert_eq!(p, vec![Pair { a: 0, b: 1, similar: true }]);
        let p = make_pairs(&[0, 1], PairStrategy::default(), 1);
        assert_eq!(p, vec![Pair { a: 0, b: 1, similar: false }]);
    }

    #[test]
    fn four_sample_batch_enumerates_six_pairs() {
        let p = make_pairs(&[0, 0, 1, 1], PairStrategy::All, 9);
        assert_eq!(p.len(), 6);
        assert_eq!(p.iter().filter(|q| q.similar).count(), 2);
        assert_eq!(p.iter().filter(|q| !q.similar).count(), 4);
    }

    #[test]
    fn pairing_deterministic_and_capped() {
        let labels: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        let a = make_pairs(&labels, PairStrategy::default(), 7);
        let b = make_pairs(&labels, PairStrategy::default(), 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
        assert_eq!(a.iter().filter(|p| p.similar).count(), 16);
        let c = make_pairs(&labels, PairStrategy::default(), 8);
        assert_ne!(a, c, "different seeds pick different subsets");
    }

    #[test]
    fn single_class_falls_back_unbalanced() {
        let p = make_pairs(&[1, 1, 1], PairStrategy::default(), 3);
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|q| q.similar));
    }
}
