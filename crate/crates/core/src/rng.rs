//! Seeded random-number substreams.
//!
//! One root seed fans out to named streams (noise injection, weight init,
//! batch shuffling, crop placement, ...). Streams are independent, so
//! changing how one consumer draws never perturbs another consumer's
//! randomness across runs with the same root seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for a named substream of `seed`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a64(name.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&fnv1a64(b"plm-substream").to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
