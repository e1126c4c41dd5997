//! Seed derivation and deterministic random streams.
//!
//! Every stochastic routine in the crate pulls from a [`ChaCha8Rng`] seeded
//! through [`derive_seed`], so a single master seed fixes the entire pipeline.
//! The derivation uses FNV-1a + splitmix64 rather than `DefaultHasher`, whose
//! output is not stable across Rust releases.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x00000100000001b3;

/// FNV-1a over a byte slice. Also used for content checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive a sub-seed for a named purpose from a master seed.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    splitmix64(master ^ fnv1a64(tag.as_bytes()))
}

/// Derive a per-item sub-seed (e.g. one per image index).
pub fn derive_seed_indexed(master: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master, tag) ^ splitmix64(index.wrapping_add(1)))
}

/// Stream for a named purpose.
pub fn stream(master: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag))
}

/// Stream seeded directly from a raw seed (e.g. a stored jitter seed).
pub fn stream_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Checksum of a parameter vector, for freeze invariants and run manifests.
pub fn param_checksum(params: &[f64]) -> u64 {
    let mut h = FNV_OFFSET;
    for &p in params {
        for b in p.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}
