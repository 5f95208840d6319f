//! Seeded generators.
//!
//! All randomness comes from PCG32 (`pcg32_srandom_r(seed, stream)`: 64-bit
//! LCG state, XSH-RR output). Uniforms take the top 53 bits of `next_u64`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg32;

/// Stream used when a caller has no reason to pick one.
pub const DEFAULT_STREAM: u64 = 0xda3e_39cb_94b9_5bdb;

pub fn generator(seed: u64, stream: u64) -> Pcg32 {
    Pcg32::new(seed, stream)
}

/// Uniform in `[0, 1)`.
pub fn uniform01(rng: &mut Pcg32) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform in `[lo, hi)`.
pub fn uniform(rng: &mut Pcg32, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform01(rng)
}

pub fn standard_normal(rng: &mut Pcg32) -> f64 {
    StandardNormal.sample(rng)
}
