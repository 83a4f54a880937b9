//! Seed derivation.
//!
//! Every random stream in the simulator is a [`ChaCha8Rng`] seeded from a
//! 64-bit value. Sub-seeds are derived by folding a key path through the
//! SplitMix64 finalizer, so the stream for `(seed, round, client)` does not
//! depend on how many other clients or rounds exist.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a seed together with a path of integer keys.
pub fn hash64(seed: u64, keys: &[u64]) -> u64 {
    let mut h = mix(seed.wrapping_add(GOLDEN));
    for &k in keys {
        h = mix(h ^ mix(k.wrapping_add(GOLDEN)));
    }
    h
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    rng(hash64(seed, keys))
}

/// Stream tags, so that sibling streams derived from one seed never collide.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const NOISE_MATRIX: u64 = 3;
    pub const CORRUPTION: u64 = 4;
    pub const FEDERATED: u64 = 5;
    pub const MODEL_INIT: u64 = 6;
    pub const SELECTION: u64 = 7;
    pub const NOISY_CLIENTS: u64 = 8;
}
