//! Seeded randomness. Every random stream in the crate is a ChaCha8 generator
//! keyed by a counter-derived sub-seed, so parallel work is reproducible
//! regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for `(stream, index)` under a parent seed.
pub fn sub_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ index)
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Named streams so sub-seeds of different pipeline stages never collide.
pub mod stream {
    pub const ENV: u64 = 1;
    pub const SOURCE_DATA: u64 = 2;
    pub const TARGET_TASK: u64 = 3;
    pub const TARGET_DATA: u64 = 4;
    pub const RESTART: u64 = 5;
    pub const CANDIDATE: u64 = 6;
    pub const REPLICATION: u64 = 7;
    pub const PROBE: u64 = 8;
    pub const MONTE_CARLO: u64 = 9;
    pub const GRID: u64 = 10;
}
