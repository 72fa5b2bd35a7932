//! Split conformal calibration and prediction sets.
//!
//! The threshold `τ` is the `⌈(n+1)(1−α)⌉`-th smallest calibration score
//! (`+∞` when that index exceeds `n`), and a test example's set holds every
//! label scoring at most `τ` under the example's single draw `u`.

use std::fmt;

use rayon::prelude::*;
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::data::{self, LabeledDataset, LogitMatrix, ProbabilityMatrix};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::probcal;
use crate::rng::{self, Role};
use crate::scores::{sort_prediction, ScoreParams, SortedPrediction, UniformDraw, Variant};

/// Fraction of the full calibration set held out for tuning.
pub const VALIDATION_FRACTION: f64 = 0.2;
/// Default rank offset of the RAPS penalty.
pub const DEFAULT_K_REG: usize = 1;

/// Default RAPS `phi` grid: 0.001, 0.01, then 0.1 to 0.5 in steps of 0.05.
pub fn raps_grid() -> Vec<f64> {
    let mut g = vec![0.001, 0.01];
    g.extend((2..=10).map(|i| f64::from(i) * 5.0 / 100.0));
    g
}

/// Default SAPS `lambda` grid: 0.02, 0.05, then 0.1 to 0.6 in steps of 0.05.
pub fn saps_grid() -> Vec<f64> {
    let mut g = vec![0.02, 0.05];
    g.extend((2..=12).map(|i| f64::from(i) * 5.0 / 100.0));
    g
}

/// Default grid for a variant; empty for variants without a tuned hyperparameter.
pub fn default_grid(variant: Variant) -> Vec<f64> {
    match variant {
        Variant::Raps => raps_grid(),
        Variant::Saps => saps_grid(),
        Variant::Aps | Variant::Cons => Vec::new(),
    }
}

/// Conformal threshold, possibly `+∞`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub enum Threshold {
    Finite(f64),
    Infinite,
}

impl Threshold {
    pub fn admits(self, score: f64) -> bool {
        match self {
            Threshold::Finite(t) => score <= t,
            Threshold::Infinite => true,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Threshold::Infinite)
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Finite(t) => write!(f, "{t}"),
            Threshold::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Threshold::Finite(t) => s.serialize_f64(t),
            Threshold::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Threshold;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a finite number or \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Threshold, E> {
                Ok(Threshold::Finite(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Threshold, E> {
                Ok(Threshold::Finite(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Threshold, E> {
                Ok(Threshold::Finite(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Threshold, E> {
                if v == "inf" {
                    Ok(Threshold::Infinite)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// Labels admitted for one example, in ascending class order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PredictionSet {
    pub members: Vec<usize>,
}

impl PredictionSet {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.members.binary_search(&label).is_ok()
    }

    /// The top-`size` classes of `sp`, sorted by class index.
    pub fn from_prefix(sp: &SortedPrediction, size: usize) -> Self {
        let mut members = sp.order()[..size].to_vec();
        members.sort_unstable();
        Self { members }
    }
}

// ---------------------------------------------------------------------------
// Calibration

/// Calibration scores of the true labels with `u_i` taken from the
/// `(seed, calibration, i)` stream.
pub fn calibration_scores(
    probs: &ProbabilityMatrix,
    labels: &[usize],
    params: &ScoreParams,
    seed: u64,
) -> Result<Vec<f64>> {
    calibration_scores_with(probs, labels, params, |i| rng::uniform(seed, Role::Calibration, i as u64))
}

/// As [`calibration_scores`], with the draws supplied by `draw(i)`.
pub fn calibration_scores_with(
    probs: &ProbabilityMatrix,
    labels: &[usize],
    params: &ScoreParams,
    draw: impl Fn(usize) -> f64 + Sync,
) -> Result<Vec<f64>> {
    params.validate()?;
    if labels.len() != probs.n() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: probs.n(),
        });
    }
    probs
        .values()
        .par_chunks(probs.k())
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (row, &y))| {
            let sp = sort_prediction(row)?;
            Ok(params.score(&sp, y, UniformDraw::new(draw(i))?))
        })
        .collect()
}

/// 1-based order-statistic index `⌈(n+1)(1−α)⌉`.
///
/// Products within 1e-9 of an integer are snapped to it first, so that
/// e.g. `(9+1)·(1−0.1)` gives 9 rather than 10 from rounding noise.
pub fn quantile_index(n: usize, alpha: f64) -> usize {
    let raw = (n as f64 + 1.0) * (1.0 - alpha);
    let near = raw.round();
    let snapped = if (raw - near).abs() < 1e-9 { near } else { raw };
    snapped.ceil().max(0.0) as usize
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("alpha", format!("{alpha} not in (0, 1)")))
    }
}

/// Conformal threshold of a score sample.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<Threshold> {
    if scores.is_empty() {
        return Err(Error::invalid("calibration scores", "empty"));
    }
    check_alpha(alpha)?;
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::invalid("calibration scores", format!("score {i} is NaN")));
    }
    let n = scores.len();
    let m = quantile_index(n, alpha);
    if m > n {
        return Ok(Threshold::Infinite);
    }
    let m = m.max(1);
    let mut buf = scores.to_vec();
    let (_, nth, _) = buf.select_nth_unstable_by(m - 1, f64::total_cmp);
    Ok(Threshold::Finite(*nth))
}

// ---------------------------------------------------------------------------
// Prediction

/// The set `{y : score(y) ≤ τ}`, scoring every label.
pub fn predict_set(sp: &SortedPrediction, u: UniformDraw, tau: Threshold, params: &ScoreParams) -> PredictionSet {
    let members = (0..sp.k())
        .filter(|&y| tau.admits(params.score(sp, y, u)))
        .collect();
    PredictionSet { members }
}

/// Number of leading ranks `r` in `[lo, hi)` (1-based, `lo ≤ hi`) with
/// `score(r) ≤ τ`, assuming scores nondecreasing in `r`.
fn admitted_ranks(score: impl Fn(usize) -> f64, tau: f64, mut lo: usize, mut hi: usize) -> usize {
    // invariant: ranks < lo are admitted, ranks ≥ hi are not
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if score(mid) <= tau {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo - 1
}

/// Walks an estimate of the set size to the exact one.
fn correct_estimate(score: impl Fn(usize) -> f64, tau: f64, mut size: usize, floor: usize, k: usize) -> usize {
    while size < k && score(size + 1) <= tau {
        size += 1;
    }
    while size > floor && score(size) > tau {
        size -= 1;
    }
    size
}

/// `|predict_set(sp, u, τ, params)|` without scoring every label.
///
/// CONS and SAPS invert their linear rank terms directly; APS and RAPS
/// binary-search the rank axis. Closed-form estimates are confirmed against
/// the score itself so floating-point edge cases agree with the full scan.
pub fn set_size_closed_form(sp: &SortedPrediction, u: UniformDraw, tau: Threshold, params: &ScoreParams) -> usize {
    let k = sp.k();
    let Threshold::Finite(tau) = tau else {
        return k;
    };
    let u = u.value();
    let score = |r: usize| params.score_at_rank(sp, r, u);
    match *params {
        ScoreParams::Cons { gamma } => {
            let est = ((tau / gamma - u).floor() + 1.0).clamp(0.0, k as f64) as usize;
            correct_estimate(score, tau, est, 0, k)
        }
        ScoreParams::Saps { lambda } => {
            if score(1) > tau {
                return 0;
            }
            let est = ((tau - sp.max_prob()) / lambda + 2.0 - u).floor().clamp(1.0, k as f64) as usize;
            correct_estimate(score, tau, est, 1, k)
        }
        ScoreParams::Aps | ScoreParams::Raps { .. } => admitted_ranks(score, tau, 1, k + 1),
    }
}

/// Prediction set via [`set_size_closed_form`] and the prefix property.
pub fn predict_set_fast(sp: &SortedPrediction, u: UniformDraw, tau: Threshold, params: &ScoreParams) -> PredictionSet {
    PredictionSet::from_prefix(sp, set_size_closed_form(sp, u, tau, params))
}

// ---------------------------------------------------------------------------
// Tuning

/// Picks the grid value with the smallest average set size when `τ` is
/// calibrated on `validation` itself. Ties go to the smaller value.
///
/// `base` supplies the variant and any fixed hyperparameters (e.g. `k_reg`).
pub fn tune(
    grid: &[f64],
    validation: &ProbabilityMatrix,
    labels: &[usize],
    alpha: f64,
    base: &ScoreParams,
    seed: u64,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::invalid("grid", "empty"));
    }
    if labels.len() != validation.n() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: validation.n(),
        });
    }
    check_alpha(alpha)?;
    let cache: Vec<(SortedPrediction, f64)> = validation
        .values()
        .par_chunks(validation.k())
        .enumerate()
        .map(|(i, row)| Ok((sort_prediction(row)?, rng::uniform(seed, Role::Calibration, i as u64))))
        .collect::<Result<_>>()?;

    let mut best: Option<(f64, usize)> = None;
    for &value in grid {
        let params = base.with_tuned_value(value);
        params.validate()?;
        let scores: Vec<f64> = cache
            .par_iter()
            .zip(labels.par_iter())
            .map(|((sp, u), &y)| params.score_at_rank(sp, sp.rank(y), *u))
            .collect();
        let tau = conformal_quantile(&scores, alpha)?;
        let total: usize = cache
            .par_iter()
            .map(|(sp, u)| set_size_closed_form(sp, UniformDraw(*u), tau, &params))
            .sum();
        let better = match best {
            None => true,
            Some((bv, bt)) => total < bt || (total == bt && value < bv),
        };
        if better {
            best = Some((value, total));
        }
    }
    Ok(best.expect("grid is non-empty").0)
}

// ---------------------------------------------------------------------------
// Pipeline

/// How the softmax temperature is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TemperaturePolicy {
    /// Fit by NLL on the validation split.
    Fit,
    Fixed(f64),
    /// `T = 1`.
    Off,
}

/// Settings of a calibration run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub alpha: f64,
    /// Variant and starting hyperparameters; tuned values replace `phi`/`lambda`.
    pub params: ScoreParams,
    /// Grid for `phi` (RAPS) or `lambda` (SAPS); ignored by APS and CONS.
    pub grid: Option<Vec<f64>>,
    pub temperature: TemperaturePolicy,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl PipelineConfig {
    pub fn new(alpha: f64, params: ScoreParams, seed: u64) -> Self {
        Self {
            alpha,
            params,
            grid: None,
            temperature: TemperaturePolicy::Off,
            seed,
            validation_fraction: VALIDATION_FRACTION,
        }
    }

    pub fn with_grid(mut self, grid: Vec<f64>) -> Self {
        self.grid = Some(grid);
        self
    }

    pub fn with_default_grid(self) -> Self {
        let grid = default_grid(self.params.variant());
        self.with_grid(grid)
    }

    pub fn with_temperature(mut self, policy: TemperaturePolicy) -> Self {
        self.temperature = policy;
        self
    }

    fn tunes(&self) -> bool {
        self.grid.is_some() && self.params.variant().is_tunable()
    }
}

/// Where a tuned hyperparameter came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedFrom {
    pub grid: Vec<f64>,
    pub validation_size: usize,
}

/// Everything needed to build prediction sets for new examples.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    pub alpha: f64,
    pub score_params: ScoreParams,
    pub temperature: f64,
    pub tau: Threshold,
    /// Number of classes of the calibration data.
    pub k: usize,
    pub n_calibration: usize,
    pub seed: u64,
    pub tuned_from: Option<TunedFrom>,
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    alpha: f64,
    variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k_reg: Option<usize>,
    temperature: f64,
    tau: Threshold,
    k: usize,
    n_calibration: usize,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tuned_from: Option<TunedFrom>,
}

impl Serialize for CalibrationRecord {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let (mut gamma, mut lambda, mut phi, mut k_reg) = (None, None, None, None);
        match self.score_params {
            ScoreParams::Aps => {}
            ScoreParams::Cons { gamma: g } => gamma = Some(g),
            ScoreParams::Raps { phi: p, k_reg: kr } => {
                phi = Some(p);
                k_reg = Some(kr);
            }
            ScoreParams::Saps { lambda: l } => lambda = Some(l),
        }
        RecordJson {
            alpha: self.alpha,
            variant: self.score_params.variant(),
            gamma,
            lambda,
            phi,
            k_reg,
            temperature: self.temperature,
            tau: self.tau,
            k: self.k,
            n_calibration: self.n_calibration,
            seed: self.seed,
            tuned_from: self.tuned_from.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CalibrationRecord {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = RecordJson::deserialize(d)?;
        let missing = |name| de::Error::custom(format!("variant {} needs field {name}", j.variant));
        let score_params = match j.variant {
            Variant::Aps => ScoreParams::Aps,
            Variant::Cons => ScoreParams::Cons {
                gamma: j.gamma.ok_or_else(|| missing("gamma"))?,
            },
            Variant::Raps => ScoreParams::Raps {
                phi: j.phi.ok_or_else(|| missing("phi"))?,
                k_reg: j.k_reg.unwrap_or(DEFAULT_K_REG),
            },
            Variant::Saps => ScoreParams::Saps {
                lambda: j.lambda.ok_or_else(|| missing("lambda"))?,
            },
        };
        let record = CalibrationRecord {
            alpha: j.alpha,
            score_params,
            temperature: j.temperature,
            tau: j.tau,
            k: j.k,
            n_calibration: j.n_calibration,
            seed: j.seed,
            tuned_from: j.tuned_from,
        };
        record.validate().map_err(de::Error::custom)?;
        Ok(record)
    }
}

impl CalibrationRecord {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        self.score_params.validate()?;
        data::check_temperature(self.temperature)?;
        if self.n_calibration == 0 {
            return Err(Error::invalid("record", "n_calibration must be at least 1"));
        }
        if self.k < 2 {
            return Err(Error::invalid("record", "k must be at least 2"));
        }
        if let Threshold::Finite(t) = self.tau {
            if !t.is_finite() {
                return Err(Error::invalid("record", "tau must be finite or \"inf\""));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::invalid("calibration record", e.to_string()))
    }

    /// Prediction sets for `logits`, with `u_i` from the `(seed, test, i)` stream.
    pub fn predict(&self, logits: &LogitMatrix) -> Result<Vec<PredictionSet>> {
        Ok(self.predict_ranked(logits, None)?.0)
    }

    /// Prediction sets plus the 1-based rank of each supplied label.
    pub fn predict_ranked(&self, logits: &LogitMatrix, labels: Option<&[usize]>) -> Result<(Vec<PredictionSet>, Vec<usize>)> {
        if logits.k() != self.k {
            return Err(Error::ClassMismatch {
                left: logits.k(),
                right: self.k,
            });
        }
        if let Some(l) = labels {
            if l.len() != logits.n() {
                return Err(Error::LengthMismatch {
                    left: l.len(),
                    right: logits.n(),
                });
            }
        }
        let probs = data::softmax(logits, self.temperature)?;
        let out: Vec<(PredictionSet, usize)> = probs
            .values()
            .par_chunks(probs.k())
            .enumerate()
            .map(|(i, row)| {
                let sp = sort_prediction(row)?;
                let u = UniformDraw(rng::uniform(self.seed, Role::Test, i as u64));
                let set = predict_set_fast(&sp, u, self.tau, &self.score_params);
                let rank = labels.map_or(0, |l| sp.rank(l[i]));
                Ok((set, rank))
            })
            .collect::<Result<_>>()?;
        let (sets, ranks) = out.into_iter().unzip();
        Ok((sets, if labels.is_some() { ranks } else { Vec::new() }))
    }
}

/// Runs split, temperature, tuning and threshold calibration on the full
/// calibration set.
///
/// Tuning variants (RAPS, SAPS with a grid) compute `τ` on the calibration
/// part of the split only; all others use every example for `τ`.
pub fn calibrate(full: &LabeledDataset, config: &PipelineConfig) -> Result<CalibrationRecord> {
    check_alpha(config.alpha)?;
    config.params.validate()?;
    if let TemperaturePolicy::Fixed(t) = config.temperature {
        data::check_temperature(t)?;
    }
    let tunes = config.tunes();
    let needs_split = tunes || config.temperature == TemperaturePolicy::Fit;
    let parts = if needs_split {
        Some(data::split(full, config.validation_fraction, config.seed)?)
    } else {
        None
    };

    let temperature = match config.temperature {
        TemperaturePolicy::Fit => probcal::fit_temperature(&parts.as_ref().expect("split").part_a).temperature,
        TemperaturePolicy::Fixed(t) => t,
        TemperaturePolicy::Off => 1.0,
    };

    let mut params = config.params;
    let mut tuned_from = None;
    let calib = if tunes {
        let parts = parts.as_ref().expect("split");
        let grid = config.grid.as_deref().expect("tunes implies a grid");
        let val = &parts.part_a;
        let val_probs = data::softmax(val.logits(), temperature)?;
        let best = tune(grid, &val_probs, val.labels(), config.alpha, &params, config.seed)?;
        params = params.with_tuned_value(best);
        tuned_from = Some(TunedFrom {
            grid: grid.to_vec(),
            validation_size: val.n(),
        });
        &parts.part_b
    } else {
        full
    };

    let probs = data::softmax(calib.logits(), temperature)?;
    let scores = calibration_scores(&probs, calib.labels(), &params, config.seed)?;
    let tau = conformal_quantile(&scores, config.alpha)?;
    Ok(CalibrationRecord {
        alpha: config.alpha,
        score_params: params,
        temperature,
        tau,
        k: full.k(),
        n_calibration: calib.n(),
        seed: config.seed,
        tuned_from,
    })
}

/// Output of a full calibrate-predict-evaluate run.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub record: CalibrationRecord,
    pub sets: Vec<PredictionSet>,
    pub report: MetricsReport,
}

/// Calibrates on `full`, predicts on `test`, and evaluates against `test`'s labels.
pub fn pipeline(full: &LabeledDataset, test: &LabeledDataset, config: &PipelineConfig) -> Result<PipelineOutput> {
    if full.k() != test.k() {
        return Err(Error::ClassMismatch {
            left: full.k(),
            right: test.k(),
        });
    }
    let record = calibrate(full, config)?;
    let (sets, ranks) = record.predict_ranked(test.logits(), Some(test.labels()))?;
    let report = metrics::report(&sets, test.labels(), &ranks, config.alpha, test.k())?;
    Ok(PipelineOutput { record, sets, report })
}

/// One line of prediction output.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictionLine {
    pub index: usize,
    pub size: usize,
    pub members: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covered: Option<bool>,
}

/// Renders sets as JSON lines, with `covered` when labels are given.
pub fn prediction_lines(sets: &[PredictionSet], labels: Option<&[usize]>) -> String {
    let mut out = String::new();
    for (index, set) in sets.iter().enumerate() {
        let line = PredictionLine {
            index,
            size: set.size(),
            members: set.members.clone(),
            covered: labels.map(|l| set.contains(l[index])),
        };
        out.push_str(&serde_json::to_string(&line).expect("line serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::sort_prediction;
    use proptest::prelude::*;

    fn u(v: f64) -> UniformDraw {
        UniformDraw::new(v).unwrap()
    }

    /// Smallest candidate `s ∈ scores` with `#{s_i ≤ s} ≥ ⌈(n+1)(1−α)⌉`.
    fn brute_quantile(scores: &[f64], alpha: f64) -> Threshold {
        let m = quantile_index(scores.len(), alpha);
        scores
            .iter()
            .copied()
            .filter(|&s| scores.iter().filter(|&&x| x <= s).count() >= m)
            .fold(None, |best: Option<f64>, s| Some(best.map_or(s, |b| b.min(s))))
            .map_or(Threshold::Infinite, Threshold::Finite)
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(conformal_quantile(&[0.1, 0.2, 0.3, 0.4], 0.5).unwrap(), Threshold::Finite(0.3));
        assert_eq!(conformal_quantile(&[0.4, 0.1, 0.3, 0.2], 0.5).unwrap(), Threshold::Finite(0.3));
        assert_eq!(conformal_quantile(&[0.1, 0.2, 0.3, 0.4], 0.05).unwrap(), Threshold::Infinite);
        assert_eq!(conformal_quantile(&[0.7; 50], 0.1).unwrap(), Threshold::Finite(0.7));
        assert!(conformal_quantile(&[], 0.1).is_err());
        assert!(conformal_quantile(&[1.0], 0.0).is_err());
        assert!(conformal_quantile(&[1.0], 1.0).is_err());
    }

    #[test]
    fn quantile_index_snaps_rounding_noise() {
        assert_eq!(quantile_index(9, 0.1), 9);
        assert_eq!(quantile_index(19, 0.05), 19);
        assert_eq!(quantile_index(99, 0.1), 90);
        assert_eq!(quantile_index(4, 0.5), 3);
        assert_eq!(quantile_index(2000, 0.1), 1801);
    }

    #[test]
    fn calibration_score_examples() {
        let probs = ProbabilityMatrix::from_rows(&[[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]]).unwrap();
        let cons = calibration_scores_with(&probs, &[0, 1], &ScoreParams::Cons { gamma: 1.0 }, |_| 0.5).unwrap();
        assert_eq!(cons, vec![0.5, 0.5]);

        let one_hot = ProbabilityMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let draws = [0.25, 0.75];
        let aps = calibration_scores_with(&one_hot, &[0, 1], &ScoreParams::Aps, |i| draws[i]).unwrap();
        assert_eq!(aps, vec![0.25, 0.75]);

        // hand evaluation, lambda = 0.2:
        //   row 0: label 0 at rank 1, u = 0.5 → 0.5·0.6            = 0.30
        //   row 1: label 0 at rank 3, u = 0.5 → 0.5 + (1 + 0.5)·0.2 = 0.80
        //   row 2: label 2 at rank 2, u = 0.1 → 0.7 + 0.1·0.2        = 0.72
        let probs = ProbabilityMatrix::from_rows(&[[0.6, 0.3, 0.1], [0.1, 0.5, 0.4], [0.05, 0.7, 0.25]]).unwrap();
        let draws = [0.5, 0.5, 0.1];
        let saps = calibration_scores_with(&probs, &[0, 0, 2], &ScoreParams::Saps { lambda: 0.2 }, |i| draws[i]).unwrap();
        for (a, b) in saps.iter().zip([0.30, 0.80, 0.72]) {
            assert!((a - b).abs() < 1e-12, "{saps:?}");
        }
    }

    #[test]
    fn calibration_scores_use_seeded_draws() {
        let probs = ProbabilityMatrix::from_rows(&[[0.6, 0.4], [0.3, 0.7]]).unwrap();
        let s = calibration_scores(&probs, &[0, 1], &ScoreParams::Cons { gamma: 1.0 }, 3).unwrap();
        assert_eq!(s[0], rng::uniform(3, Role::Calibration, 0));
        assert_eq!(s[1], rng::uniform(3, Role::Calibration, 1));
    }

    #[test]
    fn predict_examples() {
        let sp = sort_prediction(&[0.1, 0.6, 0.3]).unwrap();
        let set = predict_set(&sp, u(0.5), Threshold::Finite(0.75), &ScoreParams::Aps);
        assert_eq!(set.members, vec![1, 2]);

        for p in [
            ScoreParams::Aps,
            ScoreParams::Cons { gamma: 2.0 },
            ScoreParams::Raps { phi: 0.3, k_reg: 1 },
            ScoreParams::Saps { lambda: 0.2 },
        ] {
            assert_eq!(predict_set(&sp, u(0.9), Threshold::Infinite, &p).members, vec![0, 1, 2]);
            assert_eq!(set_size_closed_form(&sp, u(0.9), Threshold::Infinite, &p), 3);
        }

        let saps = ScoreParams::Saps { lambda: 0.2 };
        assert!(predict_set(&sp, u(0.9), Threshold::Finite(0.5), &saps).members.is_empty());
        assert_eq!(set_size_closed_form(&sp, u(0.9), Threshold::Finite(0.5), &saps), 0);
    }

    #[test]
    fn cons_closed_form_example() {
        let row: Vec<f64> = (0..10).map(|i| (10 - i) as f64 / 55.0).collect();
        let sp = sort_prediction(&row).unwrap();
        let p = ScoreParams::Cons { gamma: 1.0 };
        let tau = Threshold::Finite(2.4);
        assert_eq!(set_size_closed_form(&sp, u(0.5), tau, &p), 2);
        assert_eq!(predict_set(&sp, u(0.5), tau, &p).size(), 2);
    }

    #[test]
    fn tune_examples() {
        let probs = ProbabilityMatrix::from_rows(&[[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.3, 0.3, 0.4]]).unwrap();
        let labels = [0, 2, 1];
        let base = ScoreParams::Saps { lambda: 1.0 };
        assert_eq!(tune(&[0.3], &probs, &labels, 0.5, &base, 1).unwrap(), 0.3);
        assert_eq!(tune(&[0.15, 0.15], &probs, &labels, 0.5, &base, 1).unwrap(), 0.15);
        assert!(tune(&[], &probs, &labels, 0.5, &base, 1).is_err());
    }

    #[test]
    fn grids_match_published_values() {
        let r = raps_grid();
        assert_eq!(r.len(), 11);
        assert_eq!(&r[..3], &[0.001, 0.01, 0.1]);
        assert_eq!(r[3], 0.15);
        assert_eq!(*r.last().unwrap(), 0.5);
        let s = saps_grid();
        assert_eq!(s.len(), 13);
        assert_eq!(&s[..4], &[0.02, 0.05, 0.1, 0.15]);
        assert_eq!(*s.last().unwrap(), 0.6);
    }

    #[test]
    fn record_json_keys() {
        let rec = CalibrationRecord {
            alpha: 0.1,
            score_params: ScoreParams::Saps { lambda: 0.15 },
            temperature: 1.3,
            tau: Threshold::Infinite,
            k: 10,
            n_calibration: 80,
            seed: 4,
            tuned_from: Some(TunedFrom {
                grid: vec![0.1, 0.15],
                validation_size: 20,
            }),
        };
        let v: serde_json::Value = serde_json::from_str(&rec.to_json()).unwrap();
        assert_eq!(v["variant"], "saps");
        assert_eq!(v["lambda"], 0.15);
        assert_eq!(v["tau"], "inf");
        assert!(v.get("gamma").is_none() && v.get("phi").is_none());
        assert_eq!(v["tuned_from"]["validation_size"], 20);
        assert_eq!(CalibrationRecord::from_json(&rec.to_json()).unwrap(), rec);

        let aps = CalibrationRecord {
            score_params: ScoreParams::Aps,
            tau: Threshold::Finite(0.93),
            tuned_from: None,
            ..rec
        };
        let v: serde_json::Value = serde_json::from_str(&aps.to_json()).unwrap();
        assert_eq!(v["tau"], 0.93);
        assert!(v.get("tuned_from").is_none());
        assert_eq!(CalibrationRecord::from_json(&aps.to_json()).unwrap(), aps);

        assert!(CalibrationRecord::from_json(&aps.to_json().replace("0.93", "\"big\"")).is_err());
        assert!(CalibrationRecord::from_json(&aps.to_json().replace("\"alpha\": 0.1", "\"alpha\": 1.5")).is_err());
    }

    #[test]
    fn prediction_line_format() {
        let sets = vec![PredictionSet { members: vec![0, 3] }, PredictionSet::default()];
        let text = prediction_lines(&sets, Some(&[3, 1]));
        assert_eq!(
            text,
            "{\"index\":0,\"size\":2,\"members\":[0,3],\"covered\":true}\n{\"index\":1,\"size\":0,\"members\":[],\"covered\":false}\n"
        );
        assert!(!prediction_lines(&sets, None).contains("covered"));
    }

    fn prob_row() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, 2..30).prop_map(|mut v| {
            v[0] += 1e-3;
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v
        })
    }

    fn params() -> impl Strategy<Value = ScoreParams> {
        prop_oneof![
            Just(ScoreParams::Aps),
            (1e-3f64..10.0).prop_map(|gamma| ScoreParams::Cons { gamma }),
            (0.0f64..2.0, 0usize..5).prop_map(|(phi, k_reg)| ScoreParams::Raps { phi, k_reg }),
            (1e-3f64..2.0).prop_map(|lambda| ScoreParams::Saps { lambda }),
        ]
    }

    proptest! {
        #[test]
        fn quantile_matches_brute_force(
            raw in proptest::collection::vec(0u8..20, 1..60),
            alpha in 0.01f64..0.99,
        ) {
            let scores: Vec<f64> = raw.iter().map(|&v| f64::from(v) / 4.0).collect();
            prop_assert_eq!(conformal_quantile(&scores, alpha).unwrap(), brute_quantile(&scores, alpha));
        }

        #[test]
        fn sets_are_rank_prefixes(row in prob_row(), p in params(), uu in 0.0f64..1.0, tau in -0.5f64..12.0) {
            let sp = sort_prediction(&row).unwrap();
            let set = predict_set(&sp, u(uu), Threshold::Finite(tau), &p);
            prop_assert_eq!(&set, &PredictionSet::from_prefix(&sp, set.size()));
            prop_assert_eq!(set_size_closed_form(&sp, u(uu), Threshold::Finite(tau), &p), set.size());
        }

        #[test]
        fn sets_nest_in_tau(row in prob_row(), p in params(), uu in 0.0f64..1.0, t1 in -0.5f64..12.0, dt in 0.0f64..5.0) {
            let sp = sort_prediction(&row).unwrap();
            let small = predict_set(&sp, u(uu), Threshold::Finite(t1), &p);
            let big = predict_set(&sp, u(uu), Threshold::Finite(t1 + dt), &p);
            prop_assert!(small.members.iter().all(|m| big.contains(*m)));
        }
    }
}
