//! Random streams. Every consumer draws from its own ChaCha8 stream, keyed by the run
//! seed and a fixed tag, so changing one point count never shifts another stream.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Recorded in run metadata.
pub const GENERATOR: &str = "ChaCha8 seeded by splitmix64(seed ^ splitmix64(tag))";

pub const TAG_INTERIOR: u64 = 1;
pub const TAG_BOUNDARY: u64 = 2;
pub const TAG_DATA: u64 = 3;
pub const TAG_NOISE: u64 = 4;
pub const TAG_INIT: u64 = 5;
pub const TAG_INIT_Q: u64 = 6;
pub const TAG_INIT_SIGMA: u64 = 7;
pub const TAG_METRIC: u64 = 8;
pub const TAG_RESAMPLE: u64 = 9;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}

/// Uniform on `[0, 1)` from the top 53 bits of one draw.
#[inline]
pub fn unit<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
pub fn normal<R: RngCore>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
