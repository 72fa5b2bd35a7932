//! Set-level evaluation: coverage, size, and size-conditional coverage.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::conformal::PredictionSet;
use crate::error::{Error, Result};

/// Inclusive integer interval used to stratify sizes or ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stratum {
    pub lo: usize,
    pub hi: usize,
}

impl Stratum {
    pub const fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    /// `"lo"` for singletons, `"lo-hi"` otherwise.
    pub fn label(&self) -> String {
        if self.lo == self.hi {
            self.lo.to_string()
        } else {
            format!("{}-{}", self.lo, self.hi)
        }
    }
}

/// Set-size strata for SSCV.
pub const SSCV_PARTITION: [Stratum; 5] = [
    Stratum::new(0, 1),
    Stratum::new(2, 3),
    Stratum::new(4, 10),
    Stratum::new(11, 100),
    Stratum::new(101, 1000),
];

/// True-label rank strata for difficulty-stratified set sizes.
pub const DIFFICULTY_PARTITION: [Stratum; 5] = [
    Stratum::new(1, 1),
    Stratum::new(2, 3),
    Stratum::new(4, 10),
    Stratum::new(11, 100),
    Stratum::new(101, 1000),
];

fn check_partition(partition: &[Stratum]) -> Result<()> {
    if partition.is_empty() {
        return Err(Error::invalid("partition", "empty"));
    }
    for s in partition {
        if s.lo > s.hi {
            return Err(Error::invalid("partition", format!("interval {} is reversed", s.label())));
        }
    }
    for w in partition.windows(2) {
        if w[1].lo <= w[0].hi {
            return Err(Error::invalid("partition", "intervals must be disjoint and increasing"));
        }
    }
    Ok(())
}

/// Index of the stratum holding `v`; values past the last interval join it,
/// values below the first (or in a gap) belong to none.
fn stratum_of(v: usize, partition: &[Stratum]) -> Option<usize> {
    let last = partition.len() - 1;
    if v > partition[last].hi {
        return Some(last);
    }
    partition.iter().position(|s| s.lo <= v && v <= s.hi)
}

fn check_lengths(sets: &[PredictionSet], labels: &[usize]) -> Result<()> {
    if sets.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: sets.len(),
            right: labels.len(),
        });
    }
    if sets.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Fraction of sets containing their label.
pub fn coverage(sets: &[PredictionSet], labels: &[usize]) -> Result<f64> {
    check_lengths(sets, labels)?;
    let hits = sets.iter().zip(labels).filter(|(s, &y)| s.contains(y)).count();
    Ok(hits as f64 / sets.len() as f64)
}

/// Mean set size.
pub fn avg_size(sets: &[PredictionSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: usize = sets.iter().map(PredictionSet::size).sum();
    Ok(total as f64 / sets.len() as f64)
}

/// Fraction of empty sets; 0 for no sets.
pub fn empty_set_rate(sets: &[PredictionSet]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    sets.iter().filter(|s| s.size() == 0).count() as f64 / sets.len() as f64
}

/// Each-size coverage violation: the worst one-sided shortfall
/// `max(0, (1 − α) − coverage)` over the exact set sizes `1..=k` that occur.
/// Empty sets are excluded (see [`empty_set_rate`]).
pub fn escv(sets: &[PredictionSet], labels: &[usize], alpha: f64, k: usize) -> Result<f64> {
    check_lengths(sets, labels)?;
    let mut count = vec![0usize; k + 1];
    let mut hits = vec![0usize; k + 1];
    for (s, &y) in sets.iter().zip(labels) {
        let j = s.size();
        if j > k {
            return Err(Error::invalid("prediction set", format!("size {j} exceeds {k} classes")));
        }
        count[j] += 1;
        hits[j] += usize::from(s.contains(y));
    }
    let target = 1.0 - alpha;
    Ok((1..=k)
        .filter(|&j| count[j] > 0)
        .map(|j| (target - hits[j] as f64 / count[j] as f64).max(0.0))
        .fold(0.0, f64::max))
}

/// Size-stratified coverage violation: the worst two-sided gap
/// `|coverage − (1 − α)|` over the non-empty strata of `partition`.
pub fn sscv(sets: &[PredictionSet], labels: &[usize], alpha: f64, partition: &[Stratum]) -> Result<f64> {
    check_lengths(sets, labels)?;
    check_partition(partition)?;
    let mut count = vec![0usize; partition.len()];
    let mut hits = vec![0usize; partition.len()];
    for (s, &y) in sets.iter().zip(labels) {
        if let Some(b) = stratum_of(s.size(), partition) {
            count[b] += 1;
            hits[b] += usize::from(s.contains(y));
        }
    }
    let target = 1.0 - alpha;
    Ok((0..partition.len())
        .filter(|&b| count[b] > 0)
        .map(|b| (hits[b] as f64 / count[b] as f64 - target).abs())
        .fold(0.0, f64::max))
}

/// Mean set size and example count of one stratum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumSize(pub f64, pub usize);

/// Mean set size per true-label-rank stratum; empty strata are omitted.
pub fn size_by_difficulty(
    sets: &[PredictionSet],
    true_ranks: &[usize],
    partition: &[Stratum],
) -> Result<IndexMap<String, StratumSize>> {
    if sets.len() != true_ranks.len() {
        return Err(Error::LengthMismatch {
            left: sets.len(),
            right: true_ranks.len(),
        });
    }
    check_partition(partition)?;
    let mut count = vec![0usize; partition.len()];
    let mut total = vec![0usize; partition.len()];
    for (s, &r) in sets.iter().zip(true_ranks) {
        if let Some(b) = stratum_of(r, partition) {
            count[b] += 1;
            total[b] += s.size();
        }
    }
    Ok(partition
        .iter()
        .enumerate()
        .filter(|&(b, _)| count[b] > 0)
        .map(|(b, s)| (s.label(), StratumSize(total[b] as f64 / count[b] as f64, count[b])))
        .collect())
}

/// Evaluation summary of one test run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub coverage: f64,
    pub avg_size: f64,
    pub escv: f64,
    pub sscv: f64,
    pub size_by_difficulty: IndexMap<String, StratumSize>,
    pub empty_set_rate: f64,
    pub n_test: usize,
    pub alpha: f64,
}

/// Computes every metric with the default partitions.
pub fn report(
    sets: &[PredictionSet],
    labels: &[usize],
    true_ranks: &[usize],
    alpha: f64,
    k: usize,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        coverage: coverage(sets, labels)?,
        avg_size: avg_size(sets)?,
        escv: escv(sets, labels, alpha, k)?,
        sscv: sscv(sets, labels, alpha, &SSCV_PARTITION)?,
        size_by_difficulty: size_by_difficulty(sets, true_ranks, &DIFFICULTY_PARTITION)?,
        empty_set_rate: empty_set_rate(sets),
        n_test: sets.len(),
        alpha,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
