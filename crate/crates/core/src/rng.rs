//! Counter-based seeding.
//!
//! Every random draw in the crate is derived from an explicit seed plus a
//! small key path, so results do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a seed with a sequence of keys.
pub fn derive(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix64(seed), |acc, &k| mix64(acc ^ mix64(k)))
}

/// Stable 64-bit hash of a string key (FNV-1a), used for site paths.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn rng_for(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, keys))
}

/// Uniform draw in [0, 1) from a 64-bit hash value.
pub fn unit_from_hash(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

// Key tags for the different random streams.
pub(crate) mod tags {
    pub const INIT: u64 = 1;
    pub const TARGET: u64 = 2;
    pub const RANDOM_PERTURBATION: u64 = 3;
    pub const DROP: u64 = 4;
    pub const DROP_UNMATCHED: u64 = 5;
    pub const AUGMENT: u64 = 6;
    pub const EPOCH: u64 = 7;
    pub const ATTACK: u64 = 8;
    pub const CORRUPT: u64 = 9;
    pub const BAND_NOISE: u64 = 10;
    pub const SYNTHETIC: u64 = 11;
    pub const STEP: u64 = 12;
}
