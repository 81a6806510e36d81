//! Unsupervised domain adaptation by regularized conditional alignment.
//!
//! The library trains a shared encoder, a K-way class predictor, and a
//! 2K-way joint domain-class predictor so that label-conditioned feature
//! distributions of a labeled source domain and an unlabeled target domain
//! align with disjoint per-class support. Entropy minimization and virtual
//! adversarial training regularize the unlabeled side. The `theory` module
//! exposes the method's closed-form optimality results as executable
//! oracles, checked against independent numeric routes.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod networks;
pub mod opt;
pub mod report;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// FNV-1a 64-bit hash, used for config digests and seed derivation.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive an independent sub-seed from a base seed and a usage tag, so the
/// different random streams of a run (init, batching, VAT draws, ...) never
/// alias each other.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + tag.len());
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(tag.as_bytes());
    fnv1a64(&bytes)
}
