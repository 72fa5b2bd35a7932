//! Synthetic classifiers with a prescribed top-r accuracy profile, and the
//! closed-form set-size law of the rank-only score.
//!
//! For a classifier whose top-r accuracies are `A_1 ≤ … ≤ A_K`, let `k` be the
//! unique index with `A_k ≥ 1 − α > A_{k−1}` (`A_0 = 0`). With an unbounded
//! calibration set, the CONS threshold lands at `k − 1 + p_k` where
//! `p_k = (1 − α − A_{k−1}) / (A_k − A_{k−1})`, so a test set has size `k`
//! with probability `p_k` and `k − 1` otherwise.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{LabeledDataset, LogitMatrix, ProbabilityMatrix};
use crate::error::{Error, Result};
use crate::rng::{self, Role};
use crate::scores::sort_prediction;

const PROFILE_TOL: f64 = 1e-12;

/// Top-r accuracies `A_1 … A_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyProfile {
    a: Vec<f64>,
}

impl AccuracyProfile {
    /// Accepts any nondecreasing sequence in `[0, 1]`.
    pub fn new(a: Vec<f64>) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::invalid("accuracy profile", "empty"));
        }
        if let Some(v) = a.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("accuracy profile", format!("{v} not in [0, 1]")));
        }
        if let Some(r) = a.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::invalid(
                "accuracy profile",
                format!("decreases between ranks {} and {}", r + 1, r + 2),
            ));
        }
        Ok(Self { a })
    }

    /// `A_r = 1 − (1 − top1)·decay^(r−1)` for `r < k`, and `A_k = 1`.
    pub fn geometric(k: usize, top1: f64, decay: f64) -> Result<Self> {
        let mut a: Vec<f64> = (0..k).map(|r| 1.0 - (1.0 - top1) * decay.powi(r as i32)).collect();
        if let Some(last) = a.last_mut() {
            *last = 1.0;
        }
        Self::new(a)
    }

    pub fn values(&self) -> &[f64] {
        &self.a
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// `A_r` for 1-based `r`, with `A_0 = 0`.
    fn at(&self, r: usize) -> f64 {
        if r == 0 {
            0.0
        } else {
            self.a[r - 1]
        }
    }
}

/// Parameters of [`gen_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub k: usize,
    pub profile: AccuracyProfile,
    /// Geometric decay of the sorted probabilities, in `(0, 1)`.
    pub tail_decay: f64,
    /// Scale of the log-normal jitter on each sorted probability.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(profile: AccuracyProfile, tail_decay: f64, noise: f64, seed: u64) -> Self {
        Self {
            k: profile.len(),
            profile,
            tail_decay,
            noise,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid("synthetic spec", format!("need at least 2 classes, got {}", self.k)));
        }
        if self.k != self.profile.len() {
            return Err(Error::LengthMismatch {
                left: self.k,
                right: self.profile.len(),
            });
        }
        let last = self.profile.at(self.k);
        if (last - 1.0).abs() > PROFILE_TOL {
            return Err(Error::invalid("synthetic spec", format!("A_K must be 1, got {last}")));
        }
        if !(self.tail_decay > 0.0 && self.tail_decay < 1.0) {
            return Err(Error::invalid("tail_decay", format!("{} not in (0, 1)", self.tail_decay)));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::invalid("noise", format!("must be nonnegative, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Draws `n` examples whose true-label rank follows the accuracy profile.
///
/// Per example: sorted probabilities `p_r ∝ decay^(r−1)·exp(noise·g_r)` with
/// `g_r ~ N(0, 1)`, a uniformly random assignment of classes to ranks, and a
/// label rank drawn with `P(r) = A_r − A_{r−1}`. Logits are `ln p`.
pub fn gen_dataset(spec: &SyntheticSpec, n: usize) -> Result<LabeledDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("synthetic size", "n must be at least 1"));
    }
    let k = spec.k;
    let ln_decay = spec.tail_decay.ln();
    let mut values = vec![0f32; n * k];
    let labels: Vec<usize> = values
        .par_chunks_mut(k)
        .enumerate()
        .map(|(i, out)| {
            let mut rng = rng::stream(spec.seed, Role::Synthetic, i as u64);
            let mut logw: Vec<f64> = (0..k)
                .map(|r| r as f64 * ln_decay + spec.noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            logw.sort_by(|a, b| b.total_cmp(a));
            let max = logw[0];
            let lse = max + logw.iter().map(|w| (w - max).exp()).sum::<f64>().ln();

            let mut perm: Vec<usize> = (0..k).collect();
            for j in (1..k).rev() {
                perm.swap(j, rng.random_range(0..=j as u64) as usize);
            }
            for (r, &class) in perm.iter().enumerate() {
                out[class] = (logw[r] - lse) as f32;
            }

            let v: f64 = rng.random();
            let rank = (1..=k).find(|&r| v < spec.profile.at(r)).unwrap_or(k);
            perm[rank - 1]
        })
        .collect();
    LabeledDataset::new(LogitMatrix::new(n, k, values)?, labels)
}

/// Logits `z ~ N(0, scale²)` per class with labels drawn from
/// `softmax(z / temperature)`: a classifier whose best temperature is known.
pub fn gen_tempered(n: usize, k: usize, temperature: f64, scale: f64, seed: u64) -> Result<LabeledDataset> {
    crate::data::check_temperature(temperature)?;
    if k < 2 || n == 0 {
        return Err(Error::invalid("tempered dataset", "need n ≥ 1 and k ≥ 2"));
    }
    let mut values = vec![0f32; n * k];
    let labels: Vec<usize> = values
        .par_chunks_mut(k)
        .enumerate()
        .map(|(i, row)| {
            let mut rng = rng::stream(seed, Role::Synthetic, i as u64);
            for z in row.iter_mut() {
                *z = (scale * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
            let mut p = vec![0.0; k];
            crate::data::softmax_row(row, temperature, &mut p);
            let v: f64 = rng.random();
            let mut acc = 0.0;
            p.iter()
                .position(|&pj| {
                    acc += pj;
                    v < acc
                })
                .unwrap_or(k - 1)
        })
        .collect();
    LabeledDataset::new(LogitMatrix::new(n, k, values)?, labels)
}

/// Empirical top-r accuracies `A_1 … A_K` of a probability matrix.
pub fn empirical_profile(probs: &ProbabilityMatrix, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != probs.n() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: probs.n(),
        });
    }
    let k = probs.k();
    let mut at_rank = vec![0usize; k + 1];
    for (row, &y) in probs.rows().zip(labels) {
        at_rank[sort_prediction(row)?.rank(y)] += 1;
    }
    let n = probs.n() as f64;
    let mut acc = 0;
    Ok(at_rank[1..]
        .iter()
        .map(|&c| {
            acc += c;
            acc as f64 / n
        })
        .collect())
}

/// Rank index `k` with `A_k ≥ 1 − α > A_{k−1}` and the probability `p_k`
/// that a test set has size `k` rather than `k − 1`.
pub fn cons_size_distribution(profile: &AccuracyProfile, alpha: f64) -> Result<(usize, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", format!("{alpha} not in (0, 1)")));
    }
    let target = 1.0 - alpha;
    let k = (1..=profile.len())
        .find(|&r| profile.at(r) >= target - PROFILE_TOL)
        .ok_or(Error::Infeasible {
            target,
            k: profile.len(),
            max: profile.at(profile.len()),
        })?;
    let (hi, lo) = (profile.at(k), profile.at(k - 1));
    Ok((k, ((target - lo) / (hi - lo)).clamp(0.0, 1.0)))
}

/// Expected CONS set size `k − 1 + p_k`.
pub fn expected_cons_size(profile: &AccuracyProfile, alpha: f64) -> Result<f64> {
    let (k, p) = cons_size_distribution(profile, alpha)?;
    Ok((k - 1) as f64 + p)
}

/// Mean true-label rank within one maximum-probability bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MspBin {
    pub lo: f64,
    pub hi: f64,
    pub mean_rank: f64,
    pub count: usize,
}

/// Mean 1-based rank of the true label per equal-width MSP bin (right-closed
/// like the ECE bins). Empty bins are omitted.
pub fn msp_rank_profile(probs: &ProbabilityMatrix, labels: &[usize], bins: usize) -> Result<Vec<MspBin>> {
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
    let mut rank_sum = vec![0usize; bins];
    for (row, &y) in probs.rows().zip(labels) {
        let sp = sort_prediction(row)?;
        let b = ((sp.max_prob() * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        rank_sum[b] += sp.rank(y);
    }
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| MspBin {
            lo: b as f64 / bins as f64,
            hi: (b + 1) as f64 / bins as f64,
            mean_rank: rank_sum[b] as f64 / count[b] as f64,
            count: count[b],
        })
        .collect())
}
