//! Counter-based random streams.
//!
//! Every random draw in the toolkit is addressed by a triple
//! `(master seed, replicate, sample)`. The replicate key selects a ChaCha8
//! key, the sample index selects the ChaCha stream, so any row of any
//! replicate can be regenerated in isolation and parallel schedules produce
//! bit-identical output.
//!
//! Gaussian variates use the Box-Muller transform on pairs of 53-bit
//! uniforms `u1, u2 ∈ [0, 1)`:
//! `z0 = sqrt(-2 ln(1 - u1)) cos(2π u2)`, `z1 = sqrt(-2 ln(1 - u1)) sin(2π u2)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    mix64(seed ^ mix64(label.wrapping_add(0x6A09_E667_F3BC_C909)))
}

/// Stream for one sample of one replicate.
pub fn sample_stream(seed: u64, replicate: u64, sample: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, replicate));
    rng.set_stream(sample);
    rng
}

/// Pinned Gaussian sampler; buffers the second Box-Muller variate.
#[derive(Debug, Default)]
pub struct BoxMuller {
    spare: Option<f64>,
}

impl BoxMuller {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sample<R: Rng>(&mut self, rng: &mut R) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let radius = (-2.0 * (1.0 - u1).ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn fill<R: Rng>(&mut self, rng: &mut R, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.sample(rng);
        }
    }
}

/// Draws an index from a discrete distribution by inverse CDF.
pub fn categorical<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if target < acc {
            return i;
        }
    }
    last
}
