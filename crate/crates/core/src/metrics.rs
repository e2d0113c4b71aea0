//! Full-reference image quality metrics: PSNR, SSIM and MS-SSIM.
//!
//! All metrics take images on the [0, 1] scale (dynamic range L = 1).
//! SSIM uses the standard 11x11 Gaussian window with sigma 1.5 and
//! 1e-2/3e-2 stability constants, evaluated only at window positions fully
//! inside the image, averaged over positions and then over channels.
//! MS-SSIM uses up to five scales with the usual exponents, dropping scales
//! too small to fit the window and renormalizing the remaining exponents.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Standard per-scale MS-SSIM exponents, coarsest last.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricId {
    Psnr,
    Ssim,
    MsSsim,
}

impl MetricId {
    pub fn name(self) -> &'static str {
        match self {
            MetricId::Psnr => "psnr",
            MetricId::Ssim => "ssim",
            MetricId::MsSsim => "ms-ssim",
        }
    }
}

impl std::str::FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "psnr" => Ok(MetricId::Psnr),
            "ssim" => Ok(MetricId::Ssim),
            "ms-ssim" | "msssim" => Ok(MetricId::MsSsim),
            other => Err(Error::invalid(format!("unknown metric {other:?}"))),
        }
    }
}

impl std::fmt::Display for MetricId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn check_same_shape(a: &RasterImage, b: &RasterImage) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() || a.channels() != b.channels() {
        return Err(Error::shape(format!(
            "metric inputs differ: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

/// Mean squared error over all samples.
pub fn mse(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.samples().len();
    let mut acc = 0.0;
    for (x, y) in a.samples().iter().zip(b.samples()) {
        let d = x - y;
        acc += d * d;
    }
    Ok(acc / n as f64)
}

/// Peak signal-to-noise ratio in dB for unit dynamic range, capped at 99 dB.
pub fn psnr(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / e).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1-D Gaussian taps for the SSIM window.
fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut taps = [0.0; SSIM_WINDOW];
    let inv = 1.0 / (2.0 * SSIM_SIGMA * SSIM_SIGMA);
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = (i as isize - half) as f64;
        *t = (-d * d * inv).exp();
        sum += *t;
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Horizontal then vertical weighted sums restricted to fully-covered
/// positions. Returns the valid-region plane of size (w-10) x (h-10).
fn window_means(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let vw = w - (SSIM_WINDOW - 1);
    let vh = h - (SSIM_WINDOW - 1);
    let mut horiz = vec![0.0; vw * h];
    for y in 0..h {
        for x in 0..vw {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * plane[y * w + x + k];
            }
            horiz[y * vw + x] = acc;
        }
    }
    let mut out = vec![0.0; vw * vh];
    for y in 0..vh {
        for x in 0..vw {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * horiz[(y + k) * vw + x];
            }
            out[y * vw + x] = acc;
        }
    }
    out
}

/// Per-channel mean luminance term and contrast-structure term of SSIM.
/// Both are averaged over valid window positions.
fn ssim_channel_terms(a: &[f64], b: &[f64], w: usize, h: usize) -> (f64, f64) {
    let taps = ssim_taps();
    let n = w * h;
    let mut a2 = vec![0.0; n];
    let mut b2 = vec![0.0; n];
    let mut ab = vec![0.0; n];
    for i in 0..n {
        a2[i] = a[i] * a[i];
        b2[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    let mu_a = window_means(a, w, h, &taps);
    let mu_b = window_means(b, w, h, &taps);
    let m_a2 = window_means(&a2, w, h, &taps);
    let m_b2 = window_means(&b2, w, h, &taps);
    let m_ab = window_means(&ab, w, h, &taps);

    let c1 = (SSIM_K1) * (SSIM_K1);
    let c2 = (SSIM_K2) * (SSIM_K2);
    let mut lum_sum = 0.0;
    let mut cs_sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_a2[i] - ma * ma;
        let vb = m_b2[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        lum_sum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs_sum += (2.0 * cov + c2) / (va + vb + c2);
    }
    let count = mu_a.len() as f64;
    (lum_sum / count, cs_sum / count)
}

fn check_window_fits(a: &RasterImage) -> Result<()> {
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width(),
            a.height()
        )));
    }
    Ok(())
}

/// Structural similarity, averaged over channels.
pub fn ssim(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_same_shape(a, b)?;
    check_window_fits(a)?;
    let mut total = 0.0;
    for c in 0..a.channels() {
        // lum and cs are averaged jointly per position in the classical
        // definition; averaging the product per position is what we do here
        total += ssim_channel_plane_mean(a.plane(c), b.plane(c), a.width(), a.height());
    }
    Ok(total / a.channels() as f64)
}

/// Mean over valid positions of the full per-position SSIM value.
fn ssim_channel_plane_mean(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let taps = ssim_taps();
    let n = w * h;
    let mut a2 = vec![0.0; n];
    let mut b2 = vec![0.0; n];
    let mut ab = vec![0.0; n];
    for i in 0..n {
        a2[i] = a[i] * a[i];
        b2[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    let mu_a = window_means(a, w, h, &taps);
    let mu_b = window_means(b, w, h, &taps);
    let m_a2 = window_means(&a2, w, h, &taps);
    let m_b2 = window_means(&b2, w, h, &taps);
    let m_ab = window_means(&ab, w, h, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_a2[i] - ma * ma;
        let vb = m_b2[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    sum / mu_a.len() as f64
}

/// Number of scales MS-SSIM will use for the given dimensions: the largest
/// s <= 5 such that the window still fits after s-1 halvings.
pub fn ms_ssim_scale_count(width: usize, height: usize) -> usize {
    let mut dim = width.min(height);
    let mut scales = 0;
    while scales < MS_SSIM_WEIGHTS.len() && dim >= SSIM_WINDOW {
        scales += 1;
        dim /= 2;
    }
    scales
}

/// 2x2 mean pooling; odd trailing row/column is dropped.
fn downsample_plane(src: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (nw, nh) = (w / 2, h / 2);
    let mut out = vec![0.0; nw * nh];
    for y in 0..nh {
        for x in 0..nw {
            let i = 2 * y * w + 2 * x;
            out[y * nw + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
        }
    }
    (out, nw, nh)
}

/// Multi-scale SSIM averaged over channels.
pub fn ms_ssim(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_same_shape(a, b)?;
    check_window_fits(a)?;
    let scales = ms_ssim_scale_count(a.width(), a.height());
    let weight_sum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..scales].iter().map(|w| w / weight_sum).collect();

    let mut total = 0.0;
    for c in 0..a.channels() {
        let mut pa = a.plane(c).to_vec();
        let mut pb = b.plane(c).to_vec();
        let (mut w, mut h) = (a.width(), a.height());
        let mut value = 1.0;
        for (s, wt) in weights.iter().enumerate() {
            if s + 1 == scales {
                let full = ssim_channel_plane_mean(&pa, &pb, w, h);
                value *= full.max(0.0).powf(*wt);
            } else {
                let (_, cs) = ssim_channel_terms(&pa, &pb, w, h);
                value *= cs.max(0.0).powf(*wt);
                let (na, nw, nh) = downsample_plane(&pa, w, h);
                let (nb, _, _) = downsample_plane(&pb, w, h);
                pa = na;
                pb = nb;
                w = nw;
                h = nh;
            }
        }
        total += value;
    }
    Ok(total / a.channels() as f64)
}

/// Evaluates the metric on one pair.
pub fn evaluate(metric: MetricId, processed: &RasterImage, reference: &RasterImage) -> Result<f64> {
    match metric {
        MetricId::Psnr => psnr(processed, reference),
        MetricId::Ssim => ssim(processed, reference),
        MetricId::MsSsim => ms_ssim(processed, reference),
    }
}

/// Mean metric over pairs. Pairs are scored in parallel but summed in
/// input order, so the result does not depend on the thread count.
pub fn mean_cost(metric: MetricId, pairs: &[(&RasterImage, &RasterImage)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("mean_cost needs at least one pair"));
    }
    let scores: Vec<Result<f64>> =
        pairs.par_iter().map(|(p, r)| evaluate(metric, p, r)).collect();
    let mut acc = 0.0;
    for s in scores {
        acc += s?;
    }
    Ok(acc / pairs.len() as f64)
}
