//! Deterministic seed derivation.
//!
//! Every randomized step draws its seed from `(global seed, stage, index)`,
//! so reruns and resumed runs reproduce the same streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn derive_seed(global: u64, stage: &str, index: u64) -> u64 {
    splitmix64(splitmix64(global ^ fnv1a(stage.as_bytes())) ^ index)
}

pub fn stage_rng(global: u64, stage: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, stage, index))
}

/// Stable 64-bit digest of a string key, for per-sample indices.
pub fn key_index(key: &str) -> u64 {
    fnv1a(key.as_bytes())
}
