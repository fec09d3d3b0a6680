//! Seeded randomness. Every stochastic choice in the crate draws from a
//! SplitMix64 stream so that runs are reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

pub type SeededRng = SplitMix64;

/// Independent stream for a given purpose, derived from a user seed.
pub fn stream(seed: u64, purpose: u64) -> SeededRng {
    SplitMix64::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// One standard normal draw via the Box–Muller transform.
pub fn standard_normal(rng: &mut SeededRng) -> f64 {
    // u1 in (0, 1] keeps the logarithm finite
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub(crate) const PURPOSE_INIT: u64 = 1;
pub(crate) const PURPOSE_SHUFFLE: u64 = 2;
pub(crate) const PURPOSE_SYNTH_INPUT: u64 = 3;
pub(crate) const PURPOSE_SYNTH_NOISE: u64 = 4;
pub(crate) const PURPOSE_STABILITY: u64 = 5;
