//! Deterministic noise synthesis.
//!
//! All randomness flows from a ChaCha12 stream seeded with a u64, so any
//! degradation is reproducible across platforms and thread counts. Gaussian
//! variates use Box-Muller on top of the raw stream, Poisson variates use
//! multiplicative inversion for small means and Hormann's PTRS transformed
//! rejection for large ones. Sampling walks the channel-planar buffer in
//! storage order, one variate per sample.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Seeded random stream used by every degradation op.
pub struct NoiseRng {
    inner: ChaCha12Rng,
    pending_gaussian: Option<f64>,
}

impl NoiseRng {
    pub fn from_seed(seed: u64) -> Self {
        NoiseRng { inner: ChaCha12Rng::seed_from_u64(seed), pending_gaussian: None }
    }

    /// Stream for one image of a run: the run seed xor the image index.
    pub fn for_image(base_seed: u64, image_index: u64) -> Self {
        Self::from_seed(base_seed ^ image_index)
    }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal variate (Box-Muller, pairs cached).
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.pending_gaussian.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.pending_gaussian = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Poisson variate with the given mean.
    pub fn next_poisson(&mut self, mean: f64) -> u64 {
        assert!(mean.is_finite() && mean >= 0.0, "poisson mean must be finite and non-negative");
        if mean == 0.0 {
            return 0;
        }
        if mean < 10.0 {
            self.poisson_inversion(mean)
        } else {
            self.poisson_ptrs(mean)
        }
    }

    fn poisson_inversion(&mut self, mean: f64) -> u64 {
        let limit = (-mean).exp();
        let mut k = 0u64;
        let mut p = 1.0;
        loop {
            k += 1;
            p *= self.next_f64();
            if p <= limit {
                return k - 1;
            }
        }
    }

    /// Hormann's PTRS transformed rejection, valid for mean >= 10.
    fn poisson_ptrs(&mut self, mean: f64) -> u64 {
        let smu = mean.sqrt();
        let b = 0.931 + 2.53 * smu;
        let a = -0.059 + 0.02483 * b;
        let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        let v_r = 0.9277 - 3.6224 / (b - 2.0);
        let log_mean = mean.ln();
        loop {
            let u = self.next_f64() - 0.5;
            let v = self.next_f64();
            let us = 0.5 - u.abs();
            let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
            if us >= 0.07 && v <= v_r {
                return k as u64;
            }
            if k < 0.0 || (us < 0.013 && v > us) {
                continue;
            }
            if (v * inv_alpha / (a / (us * us) + b)).ln() <= k * log_mean - mean - ln_factorial(k as u64) {
                return k as u64;
            }
        }
    }
}

/// ln(k!), exact summation for small k, Stirling series beyond.
fn ln_factorial(k: u64) -> f64 {
    if k < 30 {
        let mut acc = 0.0;
        for i in 2..=k {
            acc += (i as f64).ln();
        }
        return acc;
    }
    let kf = k as f64;
    0.5 * (2.0 * std::f64::consts::PI * kf).ln() + kf * (kf.ln() - 1.0) + 1.0 / (12.0 * kf)
        - 1.0 / (360.0 * kf.powi(3))
        + 1.0 / (1260.0 * kf.powi(5))
}

/// Adds iid Gaussian noise with the given standard deviation (on the [0, 1]
/// intensity scale) and clamps back into range.
pub fn add_gaussian_noise(img: &RasterImage, sigma: f64, rng: &mut NoiseRng) -> Result<RasterImage> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise sigma must be non-negative, got {sigma}")));
    }
    let noisy: Vec<f64> = img
        .samples()
        .iter()
        .map(|&v| (v + sigma * rng.next_gaussian()).clamp(0.0, 1.0))
        .collect();
    RasterImage::from_samples(img.width(), img.height(), img.channels(), noisy)
}

/// Simulates photon-limited capture: each sample v becomes
/// Poisson(v * photon_max) / photon_max, clamped into [0, 1].
pub fn add_poisson_noise(img: &RasterImage, photon_max: f64, rng: &mut NoiseRng) -> Result<RasterImage> {
    if !(photon_max > 0.0) || !photon_max.is_finite() {
        return Err(Error::invalid(format!("photon_max must be positive, got {photon_max}")));
    }
    let noisy: Vec<f64> = img
        .samples()
        .iter()
        .map(|&v| (rng.next_poisson(v * photon_max) as f64 / photon_max).clamp(0.0, 1.0))
        .collect();
    RasterImage::from_samples(img.width(), img.height(), img.channels(), noisy)
}
