//! Deterministic RNG streams.
//!
//! Every random draw in the crate comes from a stream derived from
//! `(seed, purpose, index)`. Streams are independent of each other and of
//! call order, which is what makes resumed training bit-identical to an
//! uninterrupted run: the resumed process re-derives the stream for epoch
//! `k` instead of needing the serialized generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit FNV-1a. The std hasher is not guaranteed stable across
/// releases; this one is pinned here so seeds never drift.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// RNG for one `(seed, purpose, index)` triple.
pub fn derived_rng(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(purpose.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    let mix = fnv1a(&key[0..24]);
    key[24..32].copy_from_slice(&mix.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
