//! Temperature scaling and expected calibration error.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{LabeledDataset, LogitMatrix, ProbabilityMatrix};
use crate::error::{Error, Result};

/// Lower end of the temperature search range.
pub const T_MIN: f64 = 0.05;
/// Upper end of the temperature search range.
pub const T_MAX: f64 = 100.0;
/// Absolute tolerance of the search on `ln T`.
pub const LOG_T_TOL: f64 = 1e-4;
/// Objectives varying less than this across the bracket count as flat.
pub const FLAT_TOL: f64 = 1e-9;
/// Default number of equal-width ECE bins.
pub const ECE_BINS: usize = 15;

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Result of a temperature fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub final_nll: f64,
    pub iterations: usize,
}

fn row_nll(row: &[f32], label: usize, temperature: f64) -> f64 {
    let (arg, max) = row
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) });
    let max = max as f64;
    // log-sum-exp split as ln(1 + Σ_{j≠argmax} e^{…}) so that confident rows
    // keep their tiny but nonzero loss
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != arg)
        .map(|(_, &z)| ((z as f64 - max) / temperature).exp())
        .sum();
    rest.ln_1p() - (row[label] as f64 - max) / temperature
}

/// Mean negative log-likelihood of the labels under `softmax(logits / T)`.
pub fn mean_nll(logits: &LogitMatrix, labels: &[usize], temperature: f64) -> f64 {
    let k = logits.k();
    let losses: Vec<f64> = logits
        .values()
        .par_chunks(k)
        .zip(labels.par_iter())
        .map(|(row, &y)| row_nll(row, y, temperature))
        .collect();
    pairwise_sum(&losses) / losses.len() as f64
}

/// Fixed-shape pairwise summation; the result does not depend on threading.
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        v.iter().sum()
    } else {
        let (a, b) = v.split_at(v.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

/// Fits the temperature minimizing mean NLL by golden-section search on
/// `ln T ∈ [ln 0.05, ln 100]`. A flat objective yields `T = 1`.
pub fn fit_temperature(dataset: &LabeledDataset) -> TemperatureFit {
    let f = |log_t: f64| mean_nll(dataset.logits(), dataset.labels(), log_t.exp());

    let (lo, hi) = (T_MIN.ln(), T_MAX.ln());
    let (f_lo, f_hi) = (f(lo), f(hi));
    let mut a = lo;
    let mut b = hi;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));

    let probes = [f_lo, f_hi, fc, fd];
    let spread = probes.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
        - probes.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if spread < FLAT_TOL {
        return TemperatureFit {
            temperature: 1.0,
            final_nll: f(0.0),
            iterations: 0,
        };
    }

    let mut iterations = 0;
    while b - a > LOG_T_TOL {
        iterations += 1;
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    let mut best = (mid.exp(), f(mid));
    // a monotone objective is minimized exactly at a bound
    for cand in [(T_MIN, f_lo), (T_MAX, f_hi)] {
        if cand.1 < best.1 {
            best = cand;
        }
    }
    TemperatureFit {
        temperature: best.0.clamp(T_MIN, T_MAX),
        final_nll: best.1.max(0.0),
        iterations,
    }
}

fn top1(row: &[f64]) -> (usize, f64) {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) })
}

/// Expected calibration error over `bins` equal-width confidence bins.
///
/// Bin `m` (1-based) holds confidences in `((m − 1)/bins, m/bins]`; a
/// confidence of exactly 0 joins the first bin.
pub fn ece(probs: &ProbabilityMatrix, labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::invalid("bins", "need at least one bin"));
    }
    if labels.len() != probs.n() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: probs.n(),
        });
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    for (row, &y) in probs.rows().zip(labels) {
        let (pred, conf) = top1(row);
        let bin = ((conf * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[bin] += 1;
        correct[bin] += usize::from(pred == y);
        conf_sum[bin] += conf;
    }
    let n = probs.n() as f64;
    let total = (0..bins)
        .filter(|&m| count[m] > 0)
        .map(|m| {
            let c = count[m] as f64;
            (c / n) * (correct[m] as f64 / c - conf_sum[m] / c).abs()
        })
        .sum::<f64>();
    Ok(total.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{softmax, LogitMatrix};
    use crate::synthetic::gen_tempered;

    fn tempered(n: usize, k: usize, true_t: f64, seed: u64) -> LabeledDataset {
        gen_tempered(n, k, true_t, 3.0, seed).unwrap()
    }

    #[test]
    fn recovers_known_temperature() {
        let d = tempered(50_000, 10, 2.0, 5);
        let fit = fit_temperature(&d);
        assert!((1.9..=2.1).contains(&fit.temperature), "{fit:?}");
        assert!(fit.final_nll >= 0.0);
        assert!(fit.iterations > 0);
    }

    #[test]
    fn confident_correct_rows_hit_lower_bound() {
        let values = vec![10.0, 0.0, -1.0, 2.0, 12.5, 0.0, 0.0, -3.0, 11.0];
        let d = LabeledDataset::new(LogitMatrix::new(3, 3, values).unwrap(), vec![0, 1, 2]).unwrap();
        let fit = fit_temperature(&d);
        assert_eq!(fit.temperature, T_MIN);
    }

    #[test]
    fn flat_objective_returns_one() {
        for label in 0..2 {
            let d = LabeledDataset::new(LogitMatrix::new(1, 2, vec![0.0, 0.0]).unwrap(), vec![label]).unwrap();
            let fit = fit_temperature(&d);
            assert_eq!(fit.temperature, 1.0);
            assert!((fit.final_nll - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_is_order_invariant_and_deterministic() {
        let d = tempered(3_000, 6, 1.5, 9);
        let fit = fit_temperature(&d);
        assert_eq!(fit, fit_temperature(&d));
        let rev: Vec<usize> = (0..d.n()).rev().collect();
        let fit_rev = fit_temperature(&d.subset(&rev).unwrap());
        assert!((fit.temperature - fit_rev.temperature).abs() < 1e-6, "{fit:?} {fit_rev:?}");
    }

    #[test]
    fn nll_matches_direct_softmax() {
        let d = tempered(200, 5, 1.0, 2);
        let p = softmax(d.logits(), 1.7).unwrap();
        let direct: f64 = p.rows().zip(d.labels()).map(|(r, &y)| -r[y].ln()).sum::<f64>() / 200.0;
        assert!((mean_nll(d.logits(), d.labels(), 1.7) - direct).abs() < 1e-10);
    }

    #[test]
    fn ece_one_hot_correct_is_zero() {
        let p = ProbabilityMatrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(ece(&p, &[0, 2], ECE_BINS).unwrap(), 0.0);
    }

    #[test]
    fn ece_half_accuracy_binary() {
        let eps = 0.01;
        let rows = vec![[0.5 + eps, 0.5 - eps]; 100];
        let p = ProbabilityMatrix::from_rows(&rows).unwrap();
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        // one bin: |0.5 − (0.5 + eps)|
        assert!((ece(&p, &labels, ECE_BINS).unwrap() - eps).abs() < 1e-12);
    }

    #[test]
    fn ece_single_bin_gap() {
        let rows = vec![[0.9, 0.05, 0.05]; 1000];
        let p = ProbabilityMatrix::from_rows(&rows).unwrap();
        let labels: Vec<usize> = (0..1000).map(|i| usize::from(i % 5 == 0)).collect();
        assert!((ece(&p, &labels, ECE_BINS).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ece_errors() {
        let p = ProbabilityMatrix::from_rows(&[[0.5, 0.5]]).unwrap();
        assert!(ece(&p, &[0, 1], ECE_BINS).is_err());
        assert!(ece(&p, &[0], 0).is_err());
    }

    #[test]
    fn ece_bins_are_right_closed() {
        // confidence exactly 0.6 with 5 bins sits in (0.4, 0.6], not (0.6, 0.8]
        let p = ProbabilityMatrix::from_rows(&[[0.6, 0.4], [0.7, 0.3]]).unwrap();
        let e = ece(&p, &[0, 1], 5).unwrap();
        // bins: {0.6 correct} gap 0.4, {0.7 wrong} gap 0.7
        assert!((e - 0.5 * (0.4 + 0.7)).abs() < 1e-12);
    }

    #[test]
    fn calibrated_synthetic_ece_small() {
        let d = tempered(100_000, 10, 1.0, 3);
        let p = softmax(d.logits(), 1.0).unwrap();
        let e = ece(&p, d.labels(), ECE_BINS).unwrap();
        assert!(e <= 0.01, "ece {e}");
    }
}
