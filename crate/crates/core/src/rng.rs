//! Seeded random streams.
//!
//! Every stochastic stage draws from a `ChaCha8Rng` whose seed is derived from
//! a global seed plus a path of stream labels, so stages can be re-run or
//! parallelized without sharing generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a seed with a sequence of labels into a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream labels used across the crate.
pub mod label {
    pub const PACK: u64 = 1;
    pub const SGNS: u64 = 2;
    pub const KMEANS: u64 = 3;
    pub const CORRUPT: u64 = 4;
    pub const INIT: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const GENERATOR: u64 = 7;
    pub const SYNTH: u64 = 8;
}
