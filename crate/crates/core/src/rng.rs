//! Counter-based randomness.
//!
//! Every random quantity in the crate is addressed by `(seed, role, index)`.
//! The ChaCha key is built from the seed and role; the example index selects
//! the ChaCha stream. Draws for example `i` therefore never depend on how
//! many other examples were processed before it, or on which thread.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a stream of randomness is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Role {
    /// Tie-breaking draws `u` for calibration (and validation) examples.
    Calibration = 1,
    /// Tie-breaking draws `u` for test examples.
    Test = 2,
    /// Index shuffle for dataset splits.
    Split = 3,
    /// Synthetic dataset generation.
    Synthetic = 4,
}

/// Returns the generator for one `(seed, role, index)` cell.
pub fn stream(seed: u64, role: Role, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..12].copy_from_slice(&(role as u32).to_le_bytes());
    // constant tail so that the all-zero key is never used
    key[16..24].copy_from_slice(&0x9E37_79B9_7F4A_7C15u64.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// The uniform draw `u ∈ [0, 1)` attached to example `index`.
pub fn uniform(seed: u64, role: Role, index: u64) -> f64 {
    stream(seed, role, index).random::<f64>()
}
