//! Collaborative-filtering toolkit for studying how weight decay encodes item
//! popularity into embedding magnitudes, and for replacing it with a
//! popularity-aware magnitude initialization (PRISM).
//!
//! Module map:
//! - [`interactions`]: data loading, splits, popularity strata, batch sampling
//! - [`embeddings`]: embedding tables, Xavier and PRISM initialization, table files
//! - [`losses`]: BPR, sampled softmax, DirectAU, MAWU and weight decay
//! - [`trainer`]: mini-batch SGD with early stopping and grid search
//! - [`evaluation`]: overall and popularity-stratified NDCG@K
//! - [`theory`]: closed-form magnitude dynamics and a Monte-Carlo oracle
//! - [`runner`]: experiment orchestration behind the `prism` CLI

pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod interactions;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod runner;
pub mod stats;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG for `(seed, stream)`; distinct streams give
/// independent sequences from one user-facing seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
