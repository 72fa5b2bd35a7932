//! Non-conformity scores over the descending-probability order of one example.
//!
//! All four scores depend on the example only through its [`SortedPrediction`]
//! and on the label only through its 1-based rank `o`:
//!
//! | variant | score |
//! |---------|-------|
//! | APS  | `Σ_{i<o} p_(i) + u·p_(o)` |
//! | RAPS | APS `+ φ·max(0, o − k_reg)` |
//! | SAPS | `u·p_max` if `o = 1`, else `p_max + (o − 2 + u)·λ` |
//! | CONS | `γ·(o − 1 + u)` |
//!
//! Each is nondecreasing in `o` for a fixed `(example, u)`, also in floating
//! point, which is what makes every conformal set a prefix of the rank order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-example cache: class order by descending probability and its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedPrediction {
    order: Vec<usize>,
    sorted_probs: Vec<f64>,
    /// `cumulative[i] = sorted_probs[0] + … + sorted_probs[i]`, summed left to right.
    cumulative: Vec<f64>,
    /// 1-based rank of each class.
    rank: Vec<usize>,
}

impl SortedPrediction {
    /// Class indices, most probable first. Ties go to the smaller index.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn sorted_probs(&self) -> &[f64] {
        &self.sorted_probs
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// 1-based rank of `label`.
    pub fn rank(&self, label: usize) -> usize {
        self.rank[label]
    }

    pub fn k(&self) -> usize {
        self.order.len()
    }

    /// Maximum softmax probability.
    pub fn max_prob(&self) -> f64 {
        self.sorted_probs[0]
    }
}

/// Sorts one probability row in descending order, ties broken by ascending
/// class index.
pub fn sort_prediction(row: &[f64]) -> Result<SortedPrediction> {
    if row.is_empty() {
        return Err(Error::invalid("probability row", "empty"));
    }
    if let Some(j) = row.iter().position(|p| !p.is_finite()) {
        return Err(Error::invalid("probability row", format!("entry {j} is not finite")));
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps ascending index order among equal probabilities
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    let sorted_probs: Vec<f64> = order.iter().map(|&j| row[j]).collect();
    let cumulative = sorted_probs
        .iter()
        .scan(0.0, |acc, &p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let mut rank = vec![0; row.len()];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r + 1;
    }
    Ok(SortedPrediction {
        order,
        sorted_probs,
        cumulative,
        rank,
    })
}

/// A draw `u ∈ [0, 1]` shared by all labels of one example.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct UniformDraw(pub(crate) f64);

impl UniformDraw {
    pub fn new(u: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&u) {
            Ok(Self(u))
        } else {
            Err(Error::invalid("uniform draw", format!("{u} not in [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Which non-conformity score to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Aps,
    Raps,
    Saps,
    Cons,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Aps => "aps",
            Variant::Raps => "raps",
            Variant::Saps => "saps",
            Variant::Cons => "cons",
        }
    }

    /// Whether the variant has a hyperparameter chosen by grid search.
    pub fn is_tunable(self) -> bool {
        matches!(self, Variant::Raps | Variant::Saps)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aps" => Ok(Variant::Aps),
            "raps" => Ok(Variant::Raps),
            "saps" => Ok(Variant::Saps),
            "cons" => Ok(Variant::Cons),
            other => Err(Error::invalid("score variant", format!("unknown variant {other:?}"))),
        }
    }
}

/// A score variant together with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreParams {
    Aps,
    /// Rank-only score with scale `gamma > 0`.
    Cons { gamma: f64 },
    /// APS plus rank penalty `phi ≥ 0` beyond rank `k_reg`.
    Raps { phi: f64, k_reg: usize },
    /// Maximum probability plus rank weight `lambda > 0`.
    Saps { lambda: f64 },
}

impl ScoreParams {
    pub fn variant(&self) -> Variant {
        match self {
            ScoreParams::Aps => Variant::Aps,
            ScoreParams::Cons { .. } => Variant::Cons,
            ScoreParams::Raps { .. } => Variant::Raps,
            ScoreParams::Saps { .. } => Variant::Saps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ScoreParams::Aps => Ok(()),
            ScoreParams::Cons { gamma } => positive("gamma", gamma),
            ScoreParams::Raps { phi, .. } => {
                if phi.is_finite() && phi >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::invalid("phi", format!("must be nonnegative and finite, got {phi}")))
                }
            }
            ScoreParams::Saps { lambda } => positive("lambda", lambda),
        }
    }

    /// The grid-searched hyperparameter (`phi` for RAPS, `lambda` for SAPS).
    pub fn tuned_value(&self) -> Option<f64> {
        match *self {
            ScoreParams::Raps { phi, .. } => Some(phi),
            ScoreParams::Saps { lambda } => Some(lambda),
            _ => None,
        }
    }

    /// Replaces the grid-searched hyperparameter; other variants are returned unchanged.
    pub fn with_tuned_value(self, value: f64) -> Self {
        match self {
            ScoreParams::Raps { k_reg, .. } => ScoreParams::Raps { phi: value, k_reg },
            ScoreParams::Saps { .. } => ScoreParams::Saps { lambda: value },
            other => other,
        }
    }

    /// Score of the label sitting at 1-based `rank`.
    #[inline]
    pub fn score_at_rank(&self, sp: &SortedPrediction, rank: usize, u: f64) -> f64 {
        match *self {
            ScoreParams::Aps => aps_at_rank(sp, rank, u),
            ScoreParams::Cons { gamma } => gamma * ((rank - 1) as f64 + u),
            ScoreParams::Raps { phi, k_reg } => aps_at_rank(sp, rank, u) + phi * rank.saturating_sub(k_reg) as f64,
            ScoreParams::Saps { lambda } => {
                let pmax = sp.max_prob();
                if rank == 1 {
                    u * pmax
                } else {
                    pmax + ((rank - 2) as f64 + u) * lambda
                }
            }
        }
    }

    /// Score of `label`.
    pub fn score(&self, sp: &SortedPrediction, label: usize, u: UniformDraw) -> f64 {
        self.score_at_rank(sp, sp.rank(label), u.0)
    }
}

fn positive(what: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(what, format!("must be positive and finite, got {v}")))
    }
}

#[inline]
fn aps_at_rank(sp: &SortedPrediction, rank: usize, u: f64) -> f64 {
    let own = u * sp.sorted_probs[rank - 1];
    if rank == 1 {
        own
    } else {
        sp.cumulative[rank - 2] + own
    }
}

/// APS: probability mass ranked strictly above `label`, plus `u` times its own.
pub fn score_aps(sp: &SortedPrediction, label: usize, u: UniformDraw) -> f64 {
    ScoreParams::Aps.score(sp, label, u)
}

/// Rank-only score `gamma·(o − 1 + u)`.
pub fn score_cons(sp: &SortedPrediction, label: usize, u: UniformDraw, gamma: f64) -> Result<f64> {
    let p = ScoreParams::Cons { gamma };
    p.validate()?;
    Ok(p.score(sp, label, u))
}

/// APS plus `phi·max(0, o − k_reg)`.
pub fn score_raps(sp: &SortedPrediction, label: usize, u: UniformDraw, phi: f64, k_reg: usize) -> Result<f64> {
    let p = ScoreParams::Raps { phi, k_reg };
    p.validate()?;
    Ok(p.score(sp, label, u))
}

/// Keeps only the maximum probability; lower ranks add `lambda` per step.
pub fn score_saps(sp: &SortedPrediction, label: usize, u: UniformDraw, lambda: f64) -> Result<f64> {
    let p = ScoreParams::Saps { lambda };
    p.validate()?;
    Ok(p.score(sp, label, u))
}

/// Scores of every class (indexed by class) under one shared draw `u`.
pub fn scores_all_labels(sp: &SortedPrediction, u: UniformDraw, params: &ScoreParams) -> Result<Vec<f64>> {
    params.validate()?;
    Ok((0..sp.k()).map(|j| params.score(sp, j, u)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn u(v: f64) -> UniformDraw {
        UniformDraw::new(v).unwrap()
    }

    fn sp(row: &[f64]) -> SortedPrediction {
        sort_prediction(row).unwrap()
    }

    /// Scores listed in rank order.
    fn by_rank(sp: &SortedPrediction, scores: &[f64]) -> Vec<f64> {
        sp.order().iter().map(|&j| scores[j]).collect()
    }

    #[test]
    fn sort_examples() {
        let s = sp(&[0.1, 0.6, 0.3]);
        assert_eq!(s.order(), &[1, 2, 0]);
        assert_eq!(s.sorted_probs(), &[0.6, 0.3, 0.1]);
        assert_eq!(s.rank(0), 3);

        assert_eq!(sp(&[0.25; 4]).order(), &[0, 1, 2, 3]);

        let s = sp(&[0.5, 0.5]);
        assert_eq!((s.rank(0), s.rank(1)), (1, 2));

        assert!(sort_prediction(&[0.5, f64::NAN]).is_err());
    }

    #[test]
    fn aps_examples() {
        let s = sp(&[0.1, 0.6, 0.3]);
        // label 2 has rank 2
        assert!((score_aps(&s, 2, u(0.5)) - 0.75).abs() < 1e-12);
        assert_eq!(score_aps(&s, 1, u(0.0)), 0.0);
        assert!((score_aps(&s, 0, u(1.0)) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cons_examples() {
        let s = sp(&[0.1, 0.6, 0.3]);
        assert_eq!(score_cons(&s, 2, u(0.25), 1.0).unwrap(), 1.25);
        assert_eq!(score_cons(&s, 1, u(0.0), 3.7).unwrap(), 0.0);
        assert_eq!(score_cons(&s, 0, u(0.5), 2.0).unwrap(), 5.0);
        assert!(score_cons(&s, 0, u(0.5), 0.0).is_err());
        assert!(score_cons(&s, 0, u(0.5), -1.0).is_err());
    }

    #[test]
    fn raps_examples() {
        let s = sp(&[0.2, 0.5, 0.3]);
        // label 2 has rank 2
        assert!((score_raps(&s, 2, u(0.0), 0.1, 1).unwrap() - 0.6).abs() < 1e-12);
        for label in 0..3 {
            let aps = score_aps(&s, label, u(0.3));
            assert_eq!(score_raps(&s, label, u(0.3), 0.0, 1).unwrap().to_bits(), aps.to_bits());
        }
        assert_eq!(score_raps(&s, 1, u(0.3), 9.0, 1).unwrap(), score_aps(&s, 1, u(0.3)));
        assert!(score_raps(&s, 1, u(0.3), -0.1, 1).is_err());
    }

    #[test]
    fn saps_examples() {
        let s = sp(&[0.1, 0.6, 0.3]);
        assert!((score_saps(&s, 1, u(0.5), 0.2).unwrap() - 0.30).abs() < 1e-12);
        assert!((score_saps(&s, 0, u(0.5), 0.2).unwrap() - 0.90).abs() < 1e-12);
        assert!((score_saps(&s, 2, u(0.0), 0.2).unwrap() - 0.60).abs() < 1e-12);
        assert!(score_saps(&s, 2, u(0.0), 0.0).is_err());
    }

    #[test]
    fn all_labels_examples() {
        let s = sp(&[0.1, 0.6, 0.3]);
        let cons = scores_all_labels(&s, u(0.0), &ScoreParams::Cons { gamma: 1.0 }).unwrap();
        assert_eq!(by_rank(&s, &cons), vec![0.0, 1.0, 2.0]);

        let saps = scores_all_labels(&s, u(0.5), &ScoreParams::Saps { lambda: 0.2 }).unwrap();
        let saps = by_rank(&s, &saps);
        for (a, b) in saps.iter().zip([0.30, 0.70, 0.90]) {
            assert!((a - b).abs() < 1e-12, "{saps:?}");
        }

        let aps = scores_all_labels(&s, u(1.0), &ScoreParams::Aps).unwrap();
        assert_eq!(by_rank(&s, &aps), s.cumulative().to_vec());
    }

    #[test]
    fn uniform_draw_range() {
        assert!(UniformDraw::new(-0.1).is_err());
        assert!(UniformDraw::new(1.1).is_err());
        assert!(UniformDraw::new(f64::NAN).is_err());
        assert!(UniformDraw::new(1.0).is_ok());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::Aps, Variant::Raps, Variant::Saps, Variant::Cons] {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("thr".parse::<Variant>().is_err());
    }

    fn prob_row() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, 2..40).prop_map(|mut v| {
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
            (1e-3f64..2.0, 0usize..5).prop_map(|(phi, k_reg)| ScoreParams::Raps { phi, k_reg }),
            (1e-3f64..2.0).prop_map(|lambda| ScoreParams::Saps { lambda }),
        ]
    }

    proptest! {
        #[test]
        fn sorted_prediction_invariants(row in prob_row()) {
            let s = sp(&row);
            prop_assert!(s.sorted_probs().windows(2).all(|w| w[0] >= w[1]));
            for r in 1..=s.k() {
                prop_assert_eq!(s.rank(s.order()[r - 1]), r);
            }
            prop_assert!((s.sorted_probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn scores_nondecreasing_in_rank(row in prob_row(), p in params(), uu in 0.0f64..1.0) {
            let s = sp(&row);
            let by = (1..=s.k()).map(|r| p.score_at_rank(&s, r, uu)).collect::<Vec<_>>();
            prop_assert!(by.windows(2).all(|w| w[0] <= w[1]), "{:?}", by);
        }

        #[test]
        fn scores_strictly_increasing_for_rank_variants(row in prob_row(), uu in 0.001f64..0.999, g in 1e-3f64..10.0, l in 1e-3f64..2.0) {
            let s = sp(&row);
            for p in [ScoreParams::Cons { gamma: g }, ScoreParams::Saps { lambda: l }] {
                let by = (1..=s.k()).map(|r| p.score_at_rank(&s, r, uu)).collect::<Vec<_>>();
                prop_assert!(by.windows(2).all(|w| w[0] < w[1]), "{:?} {:?}", p, by);
            }
        }

        #[test]
        fn cons_scales_with_gamma(row in prob_row(), uu in 0.0f64..1.0, g in 1e-3f64..100.0) {
            let s = sp(&row);
            for label in 0..s.k() {
                let one = score_cons(&s, label, u(uu), 1.0).unwrap();
                let scaled = score_cons(&s, label, u(uu), g).unwrap();
                let tol = 1e-12 * scaled.abs().max(1e-300);
                prop_assert!((scaled - g * one).abs() <= tol);
            }
        }

        #[test]
        fn raps_without_penalty_is_aps(row in prob_row(), uu in 0.0f64..1.0, k_reg in 0usize..5) {
            let s = sp(&row);
            for label in 0..s.k() {
                let a = score_aps(&s, label, u(uu));
                let r = score_raps(&s, label, u(uu), 0.0, k_reg).unwrap();
                prop_assert_eq!(a.to_bits(), r.to_bits());
            }
        }

        #[test]
        fn scores_follow_column_permutation(
            row in prob_row(),
            p in params(),
            uu in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            // distinct probabilities keep ranks unambiguous
            let mut sorted = row.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] < w[1]));
            let k = row.len();
            let mut perm: Vec<usize> = (0..k).collect();
            let mut state = seed | 1;
            for i in (1..k).rev() {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                perm.swap(i, (state % (i as u64 + 1)) as usize);
            }
            // class j moves to column perm[j]
            let mut permuted = vec![0.0; k];
            for j in 0..k {
                permuted[perm[j]] = row[j];
            }
            let (a, b) = (sp(&row), sp(&permuted));
            for (j, &pj) in perm.iter().enumerate() {
                prop_assert_eq!(p.score(&a, j, u(uu)).to_bits(), p.score(&b, pj, u(uu)).to_bits());
            }
        }
    }
}
