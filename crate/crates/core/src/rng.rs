//! Deterministic RNG streams.
//!
//! Every random draw in a run comes from a stream keyed by the global seed and
//! a path of integers (stage, iteration, rank, ...). Streams never depend on
//! execution order, so sequential and threaded runs draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a key path into a new seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream(seed: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Stream tags, so that unrelated consumers of the same seed never collide.
pub mod tag {
    pub const PRETRAIN_BASE: u64 = 1;
    pub const PRETRAIN_MOTION: u64 = 2;
    pub const GROUND_TRUTH: u64 = 3;
    pub const GENERATE: u64 = 4;
    pub const DISTILL: u64 = 5;
    pub const DISC_INIT: u64 = 6;
    pub const SAMPLE: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const INIT: u64 = 9;
    pub const CONDITIONS: u64 = 10;
}
