//! Weak teacher supervision (WTS) for long-tailed noisy-label learning.
//!
//! The crate works over precomputed embeddings: image features `f_i`, one
//! text prototype `t_c` per class, and observed (possibly corrupted) labels.
//! A frozen cosine-similarity teacher supplies soft targets, a linear probe
//! is the student, and a per-batch overlap-ratio switch decides when the
//! teacher's KL term is mixed into the observed-label loss.
//!
//! All randomness is drawn from [`Rng`] (ChaCha8), seeded explicitly.

pub mod checks;
pub mod config;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod noise;
pub mod probe;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};

/// The seedable generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from a seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
