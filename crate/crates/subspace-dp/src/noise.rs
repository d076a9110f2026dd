//! Deterministic seeded noise. Every mechanism draws its randomness through
//! [`NoiseSource`], which maps a `(seed, stream_id)` pair to a ChaCha8 stream.
//! Identical pairs reproduce identical draws bit for bit on every platform;
//! there is no implicit entropy anywhere in the crate.
//!
//! Gaussian and Laplace variates are produced by inverse-CDF transforms of a
//! 53-bit uniform, so the draw count per variate is exactly one 64-bit word.
//! This is the one fixed generator for the whole build.

use nalgebra::DVector;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Identifies one reproducible noise stream.
///
/// `seed` is the shared secret of a release (or of a set of distributed
/// agents); `stream_id` separates independent repetitions under the same
/// seed, e.g. one stream per Monte Carlo repetition in the audit module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoiseSource {
    pub seed: u64,
    pub stream_id: u64,
}

impl NoiseSource {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        NoiseSource { seed, stream_id }
    }

    pub fn from_seed(seed: u64) -> Self {
        NoiseSource { seed, stream_id: 0 }
    }

    /// Opens the stream. Samplers are cheap to create; each release opens a
    /// fresh one so the draw sequence never depends on call history.
    pub fn sampler(&self) -> NoiseSampler {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        NoiseSampler { rng }
    }
}

/// Stateful view of one noise stream. Not shared across threads; parallel
/// code opens one sampler per stream id instead.
pub struct NoiseSampler {
    rng: ChaCha8Rng,
}

impl NoiseSampler {
    /// Uniform on the open interval (0, 1): (x + 0.5) * 2^-53 over 53 random
    /// bits, symmetric around 1/2 and never exactly 0 or 1, so quantile
    /// transforms stay finite.
    pub fn next_uniform(&mut self) -> f64 {
        let bits = self.rng.next_u64() >> 11;
        (bits as f64 + 0.5) * (1.0 / 9007199254740992.0)
    }

    pub fn next_gaussian(&mut self, sigma: f64) -> f64 {
        sigma * standard_normal_quantile(self.next_uniform())
    }

    pub fn next_laplace(&mut self, scale: f64) -> f64 {
        scale * standard_laplace_quantile(self.next_uniform())
    }

    pub fn gaussian_vector(&mut self, len: usize, sigma: f64) -> DVector<f64> {
        DVector::from_fn(len, |_, _| self.next_gaussian(sigma))
    }

    pub fn laplace_vector(&mut self, len: usize, scale: f64) -> DVector<f64> {
        DVector::from_fn(len, |_, _| self.next_laplace(scale))
    }

    /// Uniform draw from [0, bound) by rejection; used only by the synthetic
    /// fixture generators, never by mechanisms.
    pub fn next_index(&mut self, bound: usize) -> usize {
        let bound = bound as u64;
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let x = self.rng.next_u64();
            if x < zone {
                return (x % bound) as usize;
            }
        }
    }
}

/// Inverse standard normal CDF, Wichura's algorithm AS 241 (PPND16 rational
/// approximations, relative error below 1e-15 over (0, 1)).
// The published coefficient tables are kept digit for digit, including
// guard digits beyond f64 resolution.
#[allow(clippy::excessive_precision)]
pub fn standard_normal_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        const A: [f64; 8] = [
            3.3871328727963666080e0,
            1.3314166789178437745e2,
            1.9715909503065514427e3,
            1.3731693765509461125e4,
            4.5921953931549871457e4,
            6.7265770927008700853e4,
            3.3430575583588128105e4,
            2.5090809287301226727e3,
        ];
        const B: [f64; 8] = [
            1.0,
            4.2313330701600911252e1,
            6.8718700749205790830e2,
            5.3941960214247511077e3,
            2.1213794301586595867e4,
            3.9307895800092710610e4,
            2.8729085735721942674e4,
            5.2264952788528545610e3,
        ];
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let mut t = (-r.ln()).sqrt();
    let num = if t <= 5.0 {
        t -= 1.6;
        const C: [f64; 8] = [
            1.42343711074968357734e0,
            4.63033784615654529590e0,
            5.76949722146069140550e0,
            3.64784832476320460504e0,
            1.27045825245236838258e0,
            2.41780725177450611770e-1,
            2.27238449892691845833e-2,
            7.74545014278341407640e-4,
        ];
        const D: [f64; 8] = [
            1.0,
            2.05319162663775882187e0,
            1.67638483018380384940e0,
            6.89767334985100004550e-1,
            1.48103976427480074590e-1,
            1.51986665636164571966e-2,
            5.47593808499534494600e-4,
            1.05075007164441684324e-9,
        ];
        poly(&C, t) / poly(&D, t)
    } else {
        t -= 5.0;
        const E: [f64; 8] = [
            6.65790464350110377720e0,
            5.46378491116411436990e0,
            1.78482653991729133580e0,
            2.96560571828504891230e-1,
            2.65321895265761230930e-2,
            1.24266094738807843860e-3,
            2.71155556874348757815e-5,
            2.01033439929228813265e-7,
        ];
        const F: [f64; 8] = [
            1.0,
            5.99832206555887937690e-1,
            1.36929880922735805310e-1,
            1.48753612908506148525e-2,
            7.86869131145613259100e-4,
            1.84631831751005468180e-5,
            1.42151175831644588870e-7,
            2.04426310338993978564e-15,
        ];
        poly(&E, t) / poly(&F, t)
    };
    if q < 0.0 {
        -num
    } else {
        num
    }
}

/// Inverse standard Laplace CDF (location 0, scale 1).
pub fn standard_laplace_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    if p < 0.5 {
        (2.0 * p).ln()
    } else {
        -(2.0 * (1.0 - p)).ln()
    }
}

fn poly(coeffs: &[f64; 8], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}
