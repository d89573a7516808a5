//! Seed derivation and reproducible random streams.
//!
//! Anything stochastic in this crate draws from a [`ChaCha8Rng`] stream
//! derived from a global seed plus a structural index (epoch number, training
//! step, batch slot, sweep-cell key). Streams are independent of worker
//! count and scheduling, so parallel generation of a synthetic corpus is
//! reproducible epoch by epoch.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; the standard 64-bit avalanche mix.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a global seed and one index.
pub fn derive_seed(global: u64, index: u64) -> u64 {
    splitmix64(splitmix64(global) ^ splitmix64(index))
}

/// Derives a child seed from a global seed and two indices.
pub fn derive_seed2(global: u64, a: u64, b: u64) -> u64 {
    derive_seed(derive_seed(global, a), b)
}

/// Derives a child seed from a global seed and a string key.
///
/// Used for experiment sweep cells, where the key is the cell's canonical
/// name; the mapping must stay stable across runs for resumability.
pub fn derive_seed_str(global: u64, key: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(key.as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    derive_seed(global, u64::from_le_bytes(word))
}

/// A fresh stream for `(global seed, index)`.
pub fn stream(global: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, index))
}

/// A fresh stream for `(global seed, index a, index b)`.
pub fn stream2(global: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed2(global, a, b))
}
