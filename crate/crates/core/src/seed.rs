//! Stable seed derivation.
//!
//! Every random stream in the toolkit is a `ChaCha8Rng` seeded from a base
//! seed mixed with a tag, so results never depend on scheduling order or on
//! the standard library's hasher.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Derive a child seed from `base`, a string tag and an integer index.
pub fn derive(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = splitmix64(base);
    h = splitmix64(h ^ fnv1a(tag.as_bytes()));
    splitmix64(h ^ index)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random stream owned by one sample, keyed by its id.
pub fn sample_rng(base: u64, sample_id: &str) -> Rng {
    rng(derive(base, sample_id, 0))
}
