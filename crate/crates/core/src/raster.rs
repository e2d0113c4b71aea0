//! Planar raster images, Bayer mosaics and blur kernels.
//!
//! All pixel data is stored as `f64` in `[0, 1]`, channel-planar, row-major
//! within a plane. Out-of-range coordinates are resolved by mirror
//! reflection that does not repeat the border sample, so reflection
//! preserves the parity of the original index and therefore Bayer color
//! lattices survive padding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reflects an index into `[0, n)` without repeating the border sample.
///
/// For n = 5: -2 -> 2, -1 -> 1, 5 -> 3, 6 -> 2. A single row or column
/// maps everything to 0.
#[inline]
pub fn mirror(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// A channel-planar floating point image with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<f64>,
}

impl RasterImage {
    /// All-zero image. Channels must be 1 or 3.
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::validate_dims(width, height, channels)?;
        Ok(RasterImage { width, height, channels, samples: vec![0.0; width * height * channels] })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(format!("constant value {value} outside [0, 1]")));
        }
        let mut img = Self::new(width, height, channels)?;
        img.samples.fill(value);
        Ok(img)
    }

    /// Wraps a channel-planar sample buffer. Every sample must be finite and
    /// inside `[0, 1]`.
    pub fn from_samples(width: usize, height: usize, channels: usize, samples: Vec<f64>) -> Result<Self> {
        Self::validate_dims(width, height, channels)?;
        if samples.len() != width * height * channels {
            return Err(Error::shape(format!(
                "expected {} samples for {}x{}x{}, got {}",
                width * height * channels,
                width,
                height,
                channels,
                samples.len()
            )));
        }
        if let Some(bad) = samples.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("sample value {bad} outside [0, 1]")));
        }
        Ok(RasterImage { width, height, channels, samples })
    }

    fn validate_dims(width: usize, height: usize, channels: usize) -> Result<()> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("channel count must be 1 or 3, got {channels}")));
        }
        Ok(())
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.samples[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.samples[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.samples[c * self.width * self.height + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.samples[c * self.width * self.height + y * self.width + x] = v.clamp(0.0, 1.0);
    }

    /// Sample with mirrored out-of-range coordinates.
    #[inline]
    pub fn get_mirrored(&self, x: isize, y: isize, c: usize) -> f64 {
        let mx = mirror(x, self.width);
        let my = mirror(y, self.height);
        self.get(mx, my, c)
    }

    /// Rec. 601 luminance. Single-channel images are returned unchanged.
    pub fn to_grayscale(&self) -> RasterImage {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.width * self.height;
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let y = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
            out.push(y.clamp(0.0, 1.0));
        }
        RasterImage { width: self.width, height: self.height, channels: 1, samples: out }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<RasterImage> {
        if x0 + width > self.width || y0 + height > self.height || width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "crop {width}x{height}+{x0}+{y0} does not fit inside {}x{}",
                self.width, self.height
            )));
        }
        let mut samples = Vec::with_capacity(width * height * self.channels);
        for c in 0..self.channels {
            let plane = self.plane(c);
            for y in y0..y0 + height {
                samples.extend_from_slice(&plane[y * self.width + x0..y * self.width + x0 + width]);
            }
        }
        Ok(RasterImage { width, height, channels: self.channels, samples })
    }

    /// Correlates every channel with the kernel, mirror padding at borders.
    pub fn convolve(&self, kernel: &BlurKernel) -> RasterImage {
        let mut out = self.clone();
        for c in 0..self.channels {
            let filtered = correlate_plane(self.plane(c), self.width, self.height, kernel);
            let plane = out.plane_mut(c);
            for (dst, v) in plane.iter_mut().zip(filtered) {
                *dst = v.clamp(0.0, 1.0);
            }
        }
        out
    }
}

/// Plane-level correlation with mirror padding, no range clamp.
///
/// Shared by the public `convolve` (which clamps) and the deblurring
/// machinery (which must not clamp intermediate iterates).
pub(crate) fn correlate_plane(src: &[f64], width: usize, height: usize, kernel: &BlurKernel) -> Vec<f64> {
    let half = (kernel.side() / 2) as isize;
    let side = kernel.side();
    let w = kernel.weights();
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for ky in 0..side {
                let sy = mirror(y as isize + ky as isize - half, height);
                for kx in 0..side {
                    let sx = mirror(x as isize + kx as isize - half, width);
                    acc += w[ky * side + kx] * src[sy * width + sx];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Bayer color filter array layouts, named by the 2x2 tile read row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CfaLayout {
    #[serde(rename = "RGGB")]
    Rggb,
    #[serde(rename = "BGGR")]
    Bggr,
    #[serde(rename = "GRBG")]
    Grbg,
    #[serde(rename = "GBRG")]
    Gbrg,
}

impl CfaLayout {
    /// Channel index (0 = R, 1 = G, 2 = B) recorded at pixel (x, y).
    #[inline]
    pub fn color_at(self, x: usize, y: usize) -> usize {
        self.color_at_signed(x as isize, y as isize)
    }

    /// Same as `color_at` for lattice coordinates that may be negative.
    /// Mirror reflection preserves index parity, so the color of a mirrored
    /// site equals the color the unreflected lattice would assign.
    #[inline]
    pub fn color_at_signed(self, x: isize, y: isize) -> usize {
        let px = x.rem_euclid(2);
        let py = y.rem_euclid(2);
        let tile: [usize; 4] = match self {
            CfaLayout::Rggb => [0, 1, 1, 2],
            CfaLayout::Bggr => [2, 1, 1, 0],
            CfaLayout::Grbg => [1, 0, 2, 1],
            CfaLayout::Gbrg => [1, 2, 0, 1],
        };
        tile[(py * 2 + px) as usize]
    }

    pub fn name(self) -> &'static str {
        match self {
            CfaLayout::Rggb => "RGGB",
            CfaLayout::Bggr => "BGGR",
            CfaLayout::Grbg => "GRBG",
            CfaLayout::Gbrg => "GBRG",
        }
    }
}

impl std::str::FromStr for CfaLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RGGB" => Ok(CfaLayout::Rggb),
            "BGGR" => Ok(CfaLayout::Bggr),
            "GRBG" => Ok(CfaLayout::Grbg),
            "GBRG" => Ok(CfaLayout::Gbrg),
            other => Err(Error::invalid(format!("unknown CFA layout {other:?}"))),
        }
    }
}

impl std::fmt::Display for CfaLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A single-plane image where each pixel holds only the CFA color sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BayerMosaic {
    width: usize,
    height: usize,
    layout: CfaLayout,
    samples: Vec<f64>,
}

impl BayerMosaic {
    pub fn from_samples(width: usize, height: usize, layout: CfaLayout, samples: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("mosaic dimensions must be positive"));
        }
        if samples.len() != width * height {
            return Err(Error::shape(format!(
                "expected {} samples for {width}x{height} mosaic, got {}",
                width * height,
                samples.len()
            )));
        }
        if let Some(bad) = samples.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("mosaic sample {bad} outside [0, 1]")));
        }
        Ok(BayerMosaic { width, height, layout, samples })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn layout(&self) -> CfaLayout {
        self.layout
    }

    #[inline]
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.samples[y * self.width + x]
    }

    /// Sample with mirrored coordinates. The mirrored site keeps the color
    /// the lattice assigns to the unreflected index.
    #[inline]
    pub fn get_mirrored(&self, x: isize, y: isize) -> f64 {
        self.samples[mirror(y, self.height) * self.width + mirror(x, self.width)]
    }

    #[inline]
    pub fn color_at(&self, x: usize, y: usize) -> usize {
        self.layout.color_at(x, y)
    }
}

/// Subsamples a 3-channel image through a Bayer CFA.
pub fn mosaic(img: &RasterImage, layout: CfaLayout) -> Result<BayerMosaic> {
    if img.channels() != 3 {
        return Err(Error::invalid("mosaicing requires a 3-channel image"));
    }
    let (w, h) = (img.width(), img.height());
    let mut samples = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            samples.push(img.get(x, y, layout.color_at(x, y)));
        }
    }
    BayerMosaic::from_samples(w, h, layout, samples)
}

/// A normalized, odd-sided, non-negative convolution kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelRepr", into = "KernelRepr")]
pub struct BlurKernel {
    side: usize,
    weights: Vec<f64>,
}

/// Serialization shape of `BlurKernel`; deserializing re-validates.
#[derive(Serialize, Deserialize)]
struct KernelRepr {
    side: usize,
    weights: Vec<f64>,
}

impl TryFrom<KernelRepr> for BlurKernel {
    type Error = Error;

    fn try_from(repr: KernelRepr) -> Result<Self> {
        BlurKernel::new(repr.side, repr.weights)
    }
}

impl From<BlurKernel> for KernelRepr {
    fn from(k: BlurKernel) -> Self {
        KernelRepr { side: k.side, weights: k.weights }
    }
}

impl BlurKernel {
    /// Validates side oddness, non-negativity and unit sum (within 1e-9).
    pub fn new(side: usize, weights: Vec<f64>) -> Result<Self> {
        if side == 0 || side % 2 == 0 {
            return Err(Error::invalid(format!("kernel side must be odd and positive, got {side}")));
        }
        if weights.len() != side * side {
            return Err(Error::shape(format!(
                "kernel of side {side} needs {} weights, got {}",
                side * side,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("kernel weights must be finite and non-negative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("kernel weights sum to {sum}, expected 1 within 1e-9")));
        }
        Ok(BlurKernel { side, weights })
    }

    /// Gaussian sampled at integer offsets and normalized to unit sum.
    pub fn gaussian(side: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("gaussian sigma must be positive, got {sigma}")));
        }
        if side == 0 || side % 2 == 0 {
            return Err(Error::invalid(format!("kernel side must be odd and positive, got {side}")));
        }
        let half = (side / 2) as isize;
        let mut weights = Vec::with_capacity(side * side);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for dy in -half..=half {
            for dx in -half..=half {
                weights.push((-((dx * dx + dy * dy) as f64) * inv).exp());
            }
        }
        let sum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= sum;
        }
        BlurKernel { side, weights }.renormalized()
    }

    /// Identity kernel of the given odd side.
    pub fn identity(side: usize) -> Result<Self> {
        if side == 0 || side % 2 == 0 {
            return Err(Error::invalid(format!("kernel side must be odd and positive, got {side}")));
        }
        let mut weights = vec![0.0; side * side];
        weights[(side / 2) * side + side / 2] = 1.0;
        Ok(BlurKernel { side, weights })
    }

    fn renormalized(mut self) -> Result<Self> {
        let sum: f64 = self.weights.iter().sum();
        for w in &mut self.weights {
            *w /= sum;
        }
        Ok(self)
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Convenience wrapper matching the library naming used elsewhere.
pub fn gaussian_kernel(side: usize, sigma: f64) -> Result<BlurKernel> {
    BlurKernel::gaussian(side, sigma)
}
