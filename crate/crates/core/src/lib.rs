//! Treatment-specific discrete-time hazard estimation with balanced
//! representations.
//!
//! The crate is organised around the data flow of an experiment:
//!
//! - [`survdata`]: short/long survival data, time grids, hazard and survival conversions.
//! - [`dgp`]: synthetic cohorts with exact ground truth, plus the paired-outcome transform.
//! - [`diffnet`]: a small reverse-mode MLP engine with Adam and log-loss.
//! - [`ipm`]: entropic Wasserstein distance (Sinkhorn) and an exact transport oracle.
//! - [`survite`]: the balanced-representation hazard model, its losses and training loop.
//! - [`eval`]: the per-time logistic-regression baseline and all evaluation metrics.

pub mod dgp;
pub mod diffnet;
pub mod error;
pub mod eval;
pub mod ipm;
pub mod survdata;
pub mod survite;

pub use error::{Error, Result};

/// Logistic function.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Derives an independent seed for sub-stream `stream` of `base` (SplitMix64 finaliser).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded generator used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
