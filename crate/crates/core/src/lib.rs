//! Conformal prediction sets for multi-class classifiers.
//!
//! The crate consumes exported logits, turns them into probabilities, and
//! builds prediction sets with four non-conformity scores: APS, RAPS, SAPS and
//! the rank-only CONS score. Around that core sit temperature scaling,
//! threshold calibration with hyperparameter tuning, set-level metrics, and a
//! synthetic classifier whose rank-only set size is known in closed form.

pub mod conformal;
pub mod data;
pub mod error;
pub mod metrics;
pub mod probcal;
pub mod rng;
pub mod scores;
pub mod synthetic;

pub use error::{Error, Result};
