//! PAD evaluation: APCER (pooled and per-PAI), BPCER, ACER, DET curves,
//! threshold policies, and stratified k-fold splitting.
//!
//! Decision rule throughout: the score is P(attack) and a presentation is
//! classified as an attack iff `score >= threshold`. APCER is the percent of
//! attacks falling below the threshold, BPCER the percent of bonafide at or
//! above it.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::MetricsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Attack,
}

impl FromStr for Label {
    type Err = MetricsError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "attack" => Ok(Label::Attack),
            other => Err(MetricsError::InvalidSample(format!(
                "label must be \"bonafide\" or \"attack\", got {other:?}"
            ))),
        }
    }
}

/// One evaluation record. Attacks carry a non-empty PAI tag, bonafide none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: Label,
    pub pai_type: String,
    pub dataset_id: String,
}

impl ScoredSample {
    pub fn new(
        score: f64,
        label: Label,
        pai_type: impl Into<String>,
        dataset_id: impl Into<String>,
    ) -> Result<Self, MetricsError> {
        let pai_type = pai_type.into();
        if !(0.0..=1.0).contains(&score) || !score.is_finite() {
            return Err(MetricsError::InvalidSample(format!(
                "score {score} outside [0,1]"
            )));
        }
        match label {
            Label::Attack if pai_type.is_empty() => Err(MetricsError::InvalidSample(
                "attack sample needs a PAI tag".into(),
            )),
            Label::Bonafide if !pai_type.is_empty() => Err(MetricsError::InvalidSample(format!(
                "bonafide sample must not carry PAI tag {pai_type:?}"
            ))),
            _ => Ok(Self {
                score,
                label,
                pai_type,
                dataset_id: dataset_id.into(),
            }),
        }
    }

    pub fn bonafide(score: f64, dataset_id: impl Into<String>) -> Result<Self, MetricsError> {
        Self::new(score, Label::Bonafide, "", dataset_id)
    }

    pub fn attack(
        score: f64,
        pai: impl Into<String>,
        dataset_id: impl Into<String>,
    ) -> Result<Self, MetricsError> {
        Self::new(score, Label::Attack, pai, dataset_id)
    }
}

/// Attack presentation classification error rate, percent: pooled over all
/// attacks, plus per-PAI breakdowns over each tag's subset.
pub fn apcer(
    samples: &[ScoredSample],
    threshold: f64,
) -> Result<(f64, BTreeMap<String, f64>), MetricsError> {
    let mut total = 0usize;
    let mut missed = 0usize;
    let mut per_pai: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for s in samples {
        if s.label == Label::Attack {
            total += 1;
            let ent = per_pai.entry(s.pai_type.clone()).or_insert((0, 0));
            ent.0 += 1;
            if s.score < threshold {
                missed += 1;
                ent.1 += 1;
            }
        }
    }
    if total == 0 {
        return Err(MetricsError::NoAttackSamples);
    }
    let pooled = missed as f64 / total as f64 * 100.0;
    let breakdown = per_pai
        .into_iter()
        .map(|(tag, (n, miss))| (tag, miss as f64 / n as f64 * 100.0))
        .collect();
    Ok((pooled, breakdown))
}

/// Bonafide presentation classification error rate, percent.
pub fn bpcer(samples: &[ScoredSample], threshold: f64) -> Result<f64, MetricsError> {
    let mut total = 0usize;
    let mut flagged = 0usize;
    for s in samples {
        if s.label == Label::Bonafide {
            total += 1;
            if s.score >= threshold {
                flagged += 1;
            }
        }
    }
    if total == 0 {
        return Err(MetricsError::NoBonafideSamples);
    }
    Ok(flagged as f64 / total as f64 * 100.0)
}

/// Arithmetic mean of APCER and BPCER, percent.
pub fn acer(apcer: f64, bpcer: f64) -> Result<f64, MetricsError> {
    for r in [apcer, bpcer] {
        if !(0.0..=100.0).contains(&r) || !r.is_finite() {
            return Err(MetricsError::RateOutOfRange(r));
        }
    }
    Ok((apcer + bpcer) / 2.0)
}

/// Round half-to-even at `dp` decimal places.
pub fn round_half_even(x: f64, dp: u32) -> f64 {
    let scale = 10f64.powi(dp as i32);
    (x * scale).round_ties_even() / scale
}

/// Round a rate the way published result tables do: resolve the value into
/// exact decimal ten-thousandths (the 4-dp report precision), then round
/// half away from zero at `dp <= 4` places. Plain binary rounding cannot
/// reproduce e.g. 0.645 -> 0.65 because 0.645 has no f64 representation.
pub fn published_rounding(x: f64, dp: u32) -> f64 {
    assert!(dp <= 4);
    let micro = (x * 10_000.0).round() as i64;
    let scale = 10i64.pow(4 - dp);
    let half = scale / 2;
    let sign = if micro < 0 { -1 } else { 1 };
    let q = sign * ((micro.abs() + half) / scale);
    q as f64 / 10f64.powi(dp as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
}

/// Detection error tradeoff sweep. As the threshold increases, APCER is
/// non-decreasing and BPCER non-increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

impl DetCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,apcer,bpcer\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.apcer, p.bpcer));
        }
        out
    }
}

/// Candidate thresholds covering every operating point: 0, each distinct
/// score, and one value above the maximum score.
fn threshold_sweep(samples: &[ScoredSample]) -> Vec<f64> {
    let mut scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    scores.dedup();
    let mut sweep = Vec::with_capacity(scores.len() + 2);
    if scores.first().copied() != Some(0.0) {
        sweep.push(0.0);
    }
    sweep.extend_from_slice(&scores);
    let above_max = scores.last().map_or(1.0, |&m| (m + 1e-9).min(f64::INFINITY));
    sweep.push(above_max);
    sweep
}

/// Sweep thresholds over the sorted distinct scores (plus endpoints) and
/// emit at most `num_points` operating points (`0` keeps all).
pub fn det_curve(samples: &[ScoredSample], num_points: usize) -> Result<DetCurve, MetricsError> {
    let has_attack = samples.iter().any(|s| s.label == Label::Attack);
    let has_bonafide = samples.iter().any(|s| s.label == Label::Bonafide);
    if !has_attack || !has_bonafide {
        return Err(MetricsError::SingleClass);
    }
    let sweep = threshold_sweep(samples);
    let mut points: Vec<DetPoint> = sweep
        .iter()
        .map(|&t| {
            let (a, _) = apcer(samples, t).expect("attack present");
            let b = bpcer(samples, t).expect("bonafide present");
            DetPoint {
                threshold: t,
                apcer: a,
                bpcer: b,
            }
        })
        .collect();
    if num_points > 1 && points.len() > num_points {
        let last = points.len() - 1;
        let picked: Vec<DetPoint> = (0..num_points)
            .map(|i| points[i * last / (num_points - 1)])
            .collect();
        points = picked;
    }
    Ok(DetCurve { points })
}

/// Threshold selection policy. `BpcerTarget` picks the smallest threshold
/// whose BPCER does not exceed the target percent (which minimizes APCER
/// subject to the bonafide constraint).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdPolicy {
    Fixed(f64),
    BpcerTarget(f64),
    Eer,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::BpcerTarget(0.1)
    }
}

impl FromStr for ThresholdPolicy {
    type Err = MetricsError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "eer" {
            return Ok(ThresholdPolicy::Eer);
        }
        if let Some(v) = s.strip_prefix("fixed:") {
            let t: f64 = v.parse().map_err(|_| MetricsError::BadPolicy(s.into()))?;
            if !(0.0..=1.0).contains(&t) {
                return Err(MetricsError::BadPolicy(s.into()));
            }
            return Ok(ThresholdPolicy::Fixed(t));
        }
        if let Some(v) = s.strip_prefix("bpcer:") {
            let target: f64 = v.parse().map_err(|_| MetricsError::BadPolicy(s.into()))?;
            if !(0.0..=100.0).contains(&target) {
                return Err(MetricsError::BadPolicy(s.into()));
            }
            return Ok(ThresholdPolicy::BpcerTarget(target));
        }
        Err(MetricsError::BadPolicy(s.into()))
    }
}

impl std::fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdPolicy::Fixed(t) => write!(f, "fixed:{t}"),
            ThresholdPolicy::BpcerTarget(b) => write!(f, "bpcer:{b}"),
            ThresholdPolicy::Eer => write!(f, "eer"),
        }
    }
}

/// Resolve a policy into an operating threshold on the given score set.
pub fn choose_threshold(
    samples: &[ScoredSample],
    policy: ThresholdPolicy,
) -> Result<f64, MetricsError> {
    match policy {
        ThresholdPolicy::Fixed(t) => Ok(t),
        ThresholdPolicy::BpcerTarget(target) => {
            if !samples.iter().any(|s| s.label == Label::Bonafide) {
                return Err(MetricsError::NoBonafideSamples);
            }
            for t in threshold_sweep(samples) {
                if bpcer(samples, t)? <= target {
                    return Ok(t);
                }
            }
            unreachable!("the above-max sweep endpoint has BPCER 0")
        }
        ThresholdPolicy::Eer => Ok(eer(samples)?.0),
    }
}

/// Convenience equal-error-rate finder: the sweep threshold minimizing
/// |APCER - BPCER|, returning `(threshold, mean rate at that point)`.
pub fn eer(samples: &[ScoredSample]) -> Result<(f64, f64), MetricsError> {
    let curve = det_curve(samples, 0)?;
    let best = curve
        .points
        .iter()
        .min_by(|a, b| {
            let da = (a.apcer - a.bpcer).abs();
            let db = (b.apcer - b.bpcer).abs();
            da.partial_cmp(&db).expect("finite rates")
        })
        .expect("non-empty sweep");
    Ok((best.threshold, (best.apcer + best.bpcer) / 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub bonafide: usize,
    pub attack: usize,
    pub per_pai: BTreeMap<String, usize>,
}

/// Full evaluation record at one operating threshold. `acer` always equals
/// the mean of the report's own `apcer_overall` and `bpcer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub apcer_overall: f64,
    pub apcer_per_pai: BTreeMap<String, f64>,
    pub bpcer: f64,
    pub acer: f64,
    pub counts: ReportCounts,
}

impl MetricsReport {
    pub fn compute(samples: &[ScoredSample], threshold: f64) -> Result<Self, MetricsError> {
        let (apcer_overall, apcer_per_pai) = apcer(samples, threshold)?;
        let bp = bpcer(samples, threshold)?;
        let mut per_pai_counts = BTreeMap::new();
        let mut bonafide = 0usize;
        let mut attack = 0usize;
        for s in samples {
            match s.label {
                Label::Bonafide => bonafide += 1,
                Label::Attack => {
                    attack += 1;
                    *per_pai_counts.entry(s.pai_type.clone()).or_insert(0) += 1;
                }
            }
        }
        Ok(Self {
            threshold,
            apcer_overall,
            apcer_per_pai,
            bpcer: bp,
            acer: acer(apcer_overall, bp)?,
            counts: ReportCounts {
                bonafide,
                attack,
                per_pai: per_pai_counts,
            },
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table; rates at 4 decimal places, half-to-even.
    pub fn to_text_table(&self) -> String {
        let fmt = |v: f64| format!("{:.4}", round_half_even(v, 4));
        let mut rows = vec![
            ("threshold".to_string(), format!("{:.6}", self.threshold)),
            ("apcer_overall %".to_string(), fmt(self.apcer_overall)),
            ("bpcer %".to_string(), fmt(self.bpcer)),
            ("acer %".to_string(), fmt(self.acer)),
        ];
        for (tag, v) in &self.apcer_per_pai {
            rows.push((format!("apcer[{tag}] %"), fmt(*v)));
        }
        rows.push((
            "counts".to_string(),
            format!("{} bonafide / {} attack", self.counts.bonafide, self.counts.attack),
        ));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<width$}  {v}\n"));
        }
        out
    }
}

/// Stratified, seeded k-fold partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Vec<usize>>,
}

impl FoldSpec {
    /// Indices of everything outside fold `i` (the training split).
    pub fn complement(&self, fold: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Deterministic stratified k-fold split. Per-class groups are shuffled by
/// the seed and dealt round-robin with a cursor continued across classes,
/// so per-class and total fold sizes both differ by at most one.
pub fn kfold_split(labels: &[Label], k: usize, seed: u64) -> Result<FoldSpec, MetricsError> {
    if k < 2 {
        return Err(MetricsError::BadK(k));
    }
    let mut bonafide: Vec<usize> = Vec::new();
    let mut attacks: Vec<usize> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            Label::Bonafide => bonafide.push(i),
            Label::Attack => attacks.push(i),
        }
    }
    for (name, group) in [("bonafide", &bonafide), ("attack", &attacks)] {
        if group.len() < k {
            return Err(MetricsError::ClassSmallerThanK {
                class: name.to_string(),
                count: group.len(),
                k,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    bonafide.shuffle(&mut rng);
    attacks.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    let mut cursor = 0usize;
    for group in [bonafide, attacks] {
        for idx in group {
            folds[cursor % k].push(idx);
            cursor += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldSpec { k, seed, folds })
}
