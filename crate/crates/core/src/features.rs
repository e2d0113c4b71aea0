//! Local feature extraction.
//!
//! A feature map holds one plane per feature slot. Slot 0 is always the
//! constant 1, so a single-slot map drives a global (non-adaptive) model
//! and larger maps extend it. The remaining slots are windowed local
//! statistics of either the luminance plane or, for mosaiced input, the
//! same-color sites of one Bayer channel.
//!
//! Windows are mirrored at borders. Entropy descriptors histogram window
//! values into a fixed number of bins and report Shannon entropy in bits.
//! Gradient descriptors use central differences; on the sparse Bayer
//! lattice the nearest same-color sites sit two pixels apart, so the
//! difference spans four pixels regardless of channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{mirror, BayerMosaic, RasterImage};

pub const DEFAULT_BINS: usize = 32;
/// Patch size used when pre-denoising feature planes.
pub const FEATURE_DENOISE_PATCH: f64 = 9.0;
/// Filtering strength multiplier (times sigma) for that pre-denoising.
pub const FEATURE_DENOISE_STRENGTH: f64 = 0.4;
/// Epsilon in the std/mean ratio descriptor.
pub const RATIO_EPSILON: f64 = 1e-6;
/// Gradient magnitudes are clipped to [0, sqrt(2)] before binning.
pub const GRADIENT_CLIP: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorKind {
    Variance,
    Entropy,
    GradientEntropy,
    Mean,
    Std,
    MeanStdRatio,
}

/// Which plane a descriptor reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourcePlane {
    Luminance,
    BayerR,
    BayerG,
    BayerB,
}

impl SourcePlane {
    fn bayer_channel(self) -> Option<usize> {
        match self {
            SourcePlane::Luminance => None,
            SourcePlane::BayerR => Some(0),
            SourcePlane::BayerG => Some(1),
            SourcePlane::BayerB => Some(2),
        }
    }
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub kind: DescriptorKind,
    pub window: usize,
    pub source: SourcePlane,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

impl Descriptor {
    fn check(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::invalid(format!("descriptor window must be odd and >= 3, got {}", self.window)));
        }
        if self.bins < 2 {
            return Err(Error::invalid(format!("descriptor bins must be >= 2, got {}", self.bins)));
        }
        Ok(())
    }

    fn luminance(kind: DescriptorKind, window: usize) -> Descriptor {
        Descriptor { kind, window, source: SourcePlane::Luminance, bins: DEFAULT_BINS }
    }
}

/// The ordered list of descriptors behind feature slots 1..F.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub descriptors: Vec<Descriptor>,
}

impl FeatureSpec {
    /// Constant-only spec: one slot, used by global models.
    pub fn unary() -> FeatureSpec {
        FeatureSpec { descriptors: Vec::new() }
    }

    /// Denoising feature set: variance at 3 and 5, entropy and gradient
    /// entropy at 3 and 7, all on luminance. Seven slots with the constant.
    pub fn anlm_default() -> FeatureSpec {
        FeatureSpec {
            descriptors: vec![
                Descriptor::luminance(DescriptorKind::Variance, 3),
                Descriptor::luminance(DescriptorKind::Variance, 5),
                Descriptor::luminance(DescriptorKind::Entropy, 3),
                Descriptor::luminance(DescriptorKind::Entropy, 7),
                Descriptor::luminance(DescriptorKind::GradientEntropy, 3),
                Descriptor::luminance(DescriptorKind::GradientEntropy, 7),
            ],
        }
    }

    /// Demosaicing feature set: variance, entropy and gradient entropy in a
    /// 7-window on the sparse R, G and B sites. Ten slots with the constant.
    pub fn blend_default() -> FeatureSpec {
        let mut descriptors = Vec::new();
        for source in [SourcePlane::BayerR, SourcePlane::BayerG, SourcePlane::BayerB] {
            for kind in [DescriptorKind::Variance, DescriptorKind::Entropy, DescriptorKind::GradientEntropy] {
                descriptors.push(Descriptor { kind, window: 7, source, bins: DEFAULT_BINS });
            }
        }
        FeatureSpec { descriptors }
    }

    /// Deblurring feature set: mean, std and their ratio at windows 5 and 9
    /// on luminance. Seven slots with the constant.
    pub fn tv_default() -> FeatureSpec {
        FeatureSpec {
            descriptors: vec![
                Descriptor::luminance(DescriptorKind::Mean, 5),
                Descriptor::luminance(DescriptorKind::Std, 5),
                Descriptor::luminance(DescriptorKind::MeanStdRatio, 5),
                Descriptor::luminance(DescriptorKind::Mean, 9),
                Descriptor::luminance(DescriptorKind::Std, 9),
                Descriptor::luminance(DescriptorKind::MeanStdRatio, 9),
            ],
        }
    }

    /// Slots including the constant.
    pub fn feature_count(&self) -> usize {
        1 + self.descriptors.len()
    }

    pub fn needs_mosaic(&self) -> bool {
        self.descriptors.iter().any(|d| d.source != SourcePlane::Luminance)
    }

    pub fn validate(&self) -> Result<()> {
        for d in &self.descriptors {
            d.check()?;
        }
        let mixed = self.descriptors.iter().any(|d| d.source == SourcePlane::Luminance)
            && self.descriptors.iter().any(|d| d.source != SourcePlane::Luminance);
        if mixed {
            return Err(Error::invalid("a feature spec cannot mix luminance and Bayer sources"));
        }
        Ok(())
    }
}

/// Frozen z-score statistics for one feature slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStat {
    pub mean: f64,
    pub std: f64,
}

/// Per-pixel feature vectors, one plane per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    feature_count: usize,
    planes: Vec<f64>,
    normalized: bool,
}

impl FeatureMap {
    fn new(width: usize, height: usize, feature_count: usize) -> FeatureMap {
        let mut planes = vec![0.0; width * height * feature_count];
        planes[..width * height].fill(1.0);
        FeatureMap { width, height, feature_count, planes, normalized: false }
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
    pub fn feature_count(&self) -> usize {
        self.feature_count
    }

    #[inline]
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    #[inline]
    pub fn plane(&self, f: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.planes[f * n..(f + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, f: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.planes[f * n..(f + 1) * n]
    }

    /// Copies the feature vector at (x, y) into `buf`.
    #[inline]
    pub fn feature_vector(&self, x: usize, y: usize, buf: &mut [f64]) {
        debug_assert_eq!(buf.len(), self.feature_count);
        let n = self.width * self.height;
        let i = y * self.width + x;
        for (f, slot) in buf.iter_mut().enumerate() {
            *slot = self.planes[f * n + i];
        }
    }

    /// Returns the z-scored copy. Slot 0 keeps its constant 1.
    pub fn normalized(&self, stats: &[FeatureStat]) -> Result<FeatureMap> {
        if self.normalized {
            return Err(Error::invalid("feature map is already normalized"));
        }
        if stats.len() != self.feature_count {
            return Err(Error::shape(format!(
                "got {} feature stats for {} slots",
                stats.len(),
                self.feature_count
            )));
        }
        let mut out = self.clone();
        for f in 1..self.feature_count {
            let FeatureStat { mean, std } = stats[f];
            if !(std > 0.0) {
                return Err(Error::invalid("feature std must be positive"));
            }
            for v in out.plane_mut(f) {
                *v = (*v - mean) / std;
            }
        }
        out.normalized = true;
        Ok(out)
    }
}

/// Pooled per-slot mean and std over every pixel of every map. Slot 0 is
/// pinned at (0, 1); stds are floored at 1e-9 so constant features stay
/// harmless after z-scoring.
pub fn compute_stats(maps: &[&FeatureMap]) -> Result<Vec<FeatureStat>> {
    let f_count = match maps.first() {
        Some(m) => m.feature_count(),
        None => return Err(Error::invalid("compute_stats needs at least one map")),
    };
    if maps.iter().any(|m| m.feature_count() != f_count) {
        return Err(Error::shape("feature maps disagree on slot count"));
    }
    if maps.iter().any(|m| m.is_normalized()) {
        return Err(Error::invalid("compute_stats expects raw feature maps"));
    }
    let mut stats = vec![FeatureStat { mean: 0.0, std: 1.0 }];
    for f in 1..f_count {
        let mut sum = 0.0;
        let mut count = 0usize;
        for m in maps {
            for v in m.plane(f) {
                sum += v;
            }
            count += m.plane(f).len();
        }
        let mean = sum / count as f64;
        let mut ss = 0.0;
        for m in maps {
            for v in m.plane(f) {
                let d = v - mean;
                ss += d * d;
            }
        }
        let std = (ss / count as f64).sqrt().max(1e-9);
        stats.push(FeatureStat { mean, std });
    }
    Ok(stats)
}

/// Computes the raw (unnormalized) feature map of an image. Luminance
/// descriptors read the Rec. 601 gray plane.
pub fn build_features(img: &RasterImage, spec: &FeatureSpec) -> Result<FeatureMap> {
    spec.validate()?;
    if spec.needs_mosaic() {
        return Err(Error::invalid("this spec reads Bayer planes; use build_features_mosaic"));
    }
    let gray = img.to_grayscale();
    let plane = gray.plane(0);
    let (w, h) = (img.width(), img.height());
    let mut fm = FeatureMap::new(w, h, spec.feature_count());
    let grad = gradient_magnitude_dense(plane, w, h);
    for (slot, d) in spec.descriptors.iter().enumerate() {
        let out = match d.kind {
            DescriptorKind::Variance => windowed_moments(plane, w, h, d.window, Moment::Variance),
            DescriptorKind::Mean => windowed_moments(plane, w, h, d.window, Moment::Mean),
            DescriptorKind::Std => windowed_moments(plane, w, h, d.window, Moment::Std),
            DescriptorKind::MeanStdRatio => windowed_moments(plane, w, h, d.window, Moment::Ratio),
            DescriptorKind::Entropy => windowed_entropy(plane, w, h, d.window, d.bins, 1.0),
            DescriptorKind::GradientEntropy => windowed_entropy(&grad, w, h, d.window, d.bins, GRADIENT_CLIP),
        };
        fm.plane_mut(slot + 1).copy_from_slice(&out);
    }
    Ok(fm)
}

/// Computes the raw feature map of a Bayer mosaic. Each descriptor pools
/// only the sites carrying its channel; the mirror reflection used at
/// borders preserves lattice parity, so reflected sites keep their color.
pub fn build_features_mosaic(m: &BayerMosaic, spec: &FeatureSpec) -> Result<FeatureMap> {
    spec.validate()?;
    if !spec.needs_mosaic() && !spec.descriptors.is_empty() {
        return Err(Error::invalid("this spec reads luminance; use build_features"));
    }
    let (w, h) = (m.width(), m.height());
    let mut fm = FeatureMap::new(w, h, spec.feature_count());
    // per-channel gradient magnitude at same-color sites (zero elsewhere)
    let mut grads: [Option<Vec<f64>>; 3] = [None, None, None];
    for (slot, d) in spec.descriptors.iter().enumerate() {
        let c = d.source.bayer_channel().expect("validated as Bayer source");
        let out = match d.kind {
            DescriptorKind::Variance => sparse_moments(m, c, d.window, Moment::Variance),
            DescriptorKind::Mean => sparse_moments(m, c, d.window, Moment::Mean),
            DescriptorKind::Std => sparse_moments(m, c, d.window, Moment::Std),
            DescriptorKind::MeanStdRatio => sparse_moments(m, c, d.window, Moment::Ratio),
            DescriptorKind::Entropy => sparse_entropy(m, c, d.window, d.bins, None),
            DescriptorKind::GradientEntropy => {
                let gplane = grads[c].get_or_insert_with(|| gradient_magnitude_sparse(m, c));
                sparse_entropy(m, c, d.window, d.bins, Some(gplane))
            }
        };
        fm.plane_mut(slot + 1).copy_from_slice(&out);
    }
    Ok(fm)
}

/// Replaces feature planes 1..F with their NLM-filtered versions, matching
/// patches on the degraded guide image with a fixed 9-pixel patch and
/// strength 0.4 * sigma. Slot 0 is untouched. Used before normalization so
/// noise in the degraded input does not leak into the model's features.
pub fn denoise_feature_map(fm: &FeatureMap, guide: &RasterImage, sigma: f64) -> Result<FeatureMap> {
    if fm.is_normalized() {
        return Err(Error::invalid("denoise feature maps before normalization"));
    }
    if fm.width() != guide.width() || fm.height() != guide.height() {
        return Err(Error::shape("feature map and guide image sizes differ"));
    }
    if fm.feature_count() == 1 {
        return Ok(fm.clone());
    }
    let planes: Vec<&[f64]> = (1..fm.feature_count()).map(|f| fm.plane(f)).collect();
    let filtered = crate::anlm::filter_planes_with_guide(
        guide,
        &planes,
        FEATURE_DENOISE_PATCH,
        FEATURE_DENOISE_STRENGTH,
        sigma,
        &crate::anlm::AnlmConfig::default(),
    )?;
    let mut out = fm.clone();
    for (i, plane) in filtered.into_iter().enumerate() {
        out.plane_mut(i + 1).copy_from_slice(&plane);
    }
    Ok(out)
}

enum Moment {
    Mean,
    Variance,
    Std,
    Ratio,
}

fn windowed_moments(plane: &[f64], w: usize, h: usize, window: usize, which: Moment) -> Vec<f64> {
    let half = (window / 2) as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            for dy in -half..=half {
                let sy = mirror(y as isize + dy, h);
                for dx in -half..=half {
                    let v = plane[sy * w + mirror(x as isize + dx, w)];
                    sum += v;
                    sum2 += v * v;
                }
            }
            let n = (window * window) as f64;
            let mean = sum / n;
            let var = (sum2 / n - mean * mean).max(0.0);
            out[y * w + x] = match which {
                Moment::Mean => mean,
                Moment::Variance => var,
                Moment::Std => var.sqrt(),
                Moment::Ratio => var.sqrt() / (mean + RATIO_EPSILON),
            };
        }
    }
    out
}

fn windowed_entropy(plane: &[f64], w: usize, h: usize, window: usize, bins: usize, range: f64) -> Vec<f64> {
    let half = (window / 2) as isize;
    let scale = bins as f64 / range;
    let mut hist = vec![0u32; bins];
    let mut out = vec![0.0; w * h];
    let total = (window * window) as f64;
    for y in 0..h {
        for x in 0..w {
            hist.fill(0);
            for dy in -half..=half {
                let sy = mirror(y as isize + dy, h);
                for dx in -half..=half {
                    let v = plane[sy * w + mirror(x as isize + dx, w)];
                    let bin = ((v * scale) as usize).min(bins - 1);
                    hist[bin] += 1;
                }
            }
            out[y * w + x] = shannon_bits(&hist, total);
        }
    }
    out
}

#[inline]
fn shannon_bits(hist: &[u32], total: f64) -> f64 {
    let mut entropy = 0.0;
    for &c in hist {
        if c > 0 {
            let p = c as f64 / total;
            entropy -= p * p.log2();
        }
    }
    entropy
}

/// Central-difference gradient magnitude, clipped to [0, sqrt(2)].
fn gradient_magnitude_dense(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let gx = (plane[y * w + mirror(x as isize + 1, w)] - plane[y * w + mirror(x as isize - 1, w)]) / 2.0;
            let gy = (plane[mirror(y as isize + 1, h) * w + x] - plane[mirror(y as isize - 1, h) * w + x]) / 2.0;
            out[y * w + x] = (gx * gx + gy * gy).sqrt().min(GRADIENT_CLIP);
        }
    }
    out
}

/// Gradient magnitude on the same-color sublattice. Nearest same-color
/// sites along each axis are two pixels away, so the centered difference
/// spans four pixels. Sites of other colors hold zero and are never read.
fn gradient_magnitude_sparse(m: &BayerMosaic, channel: usize) -> Vec<f64> {
    let (w, h) = (m.width(), m.height());
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            if m.color_at(x, y) != channel {
                continue;
            }
            let gx = (m.get_mirrored(x as isize + 2, y as isize) - m.get_mirrored(x as isize - 2, y as isize)) / 4.0;
            let gy = (m.get_mirrored(x as isize, y as isize + 2) - m.get_mirrored(x as isize, y as isize - 2)) / 4.0;
            out[y * w + x] = (gx * gx + gy * gy).sqrt().min(GRADIENT_CLIP);
        }
    }
    out
}

fn sparse_moments(m: &BayerMosaic, channel: usize, window: usize, which: Moment) -> Vec<f64> {
    let (w, h) = (m.width(), m.height());
    let half = (window / 2) as isize;
    let layout = m.layout();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            let mut n = 0.0;
            for dy in -half..=half {
                for dx in -half..=half {
                    let (sx, sy) = (x as isize + dx, y as isize + dy);
                    if layout.color_at_signed(sx, sy) != channel {
                        continue;
                    }
                    let v = m.get_mirrored(sx, sy);
                    sum += v;
                    sum2 += v * v;
                    n += 1.0;
                }
            }
            let mean = sum / n;
            let var = (sum2 / n - mean * mean).max(0.0);
            out[y * w + x] = match which {
                Moment::Mean => mean,
                Moment::Variance => var,
                Moment::Std => var.sqrt(),
                Moment::Ratio => var.sqrt() / (mean + RATIO_EPSILON),
            };
        }
    }
    out
}

/// Entropy over same-color sites; with `values` given, bins those
/// (gradient magnitudes over [0, sqrt(2)]) instead of raw samples.
fn sparse_entropy(m: &BayerMosaic, channel: usize, window: usize, bins: usize, values: Option<&[f64]>) -> Vec<f64> {
    let (w, h) = (m.width(), m.height());
    let half = (window / 2) as isize;
    let layout = m.layout();
    let range = if values.is_some() { GRADIENT_CLIP } else { 1.0 };
    let scale = bins as f64 / range;
    let mut hist = vec![0u32; bins];
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            hist.fill(0);
            let mut n = 0u32;
            for dy in -half..=half {
                for dx in -half..=half {
                    let (sx, sy) = (x as isize + dx, y as isize + dy);
                    if layout.color_at_signed(sx, sy) != channel {
                        continue;
                    }
                    let v = match values {
                        Some(plane) => plane[mirror(sy, h) * w + mirror(sx, w)],
                        None => m.get_mirrored(sx, sy),
                    };
                    hist[((v * scale) as usize).min(bins - 1)] += 1;
                    n += 1;
                }
            }
            out[y * w + x] = shannon_bits(&hist, n as f64);
        }
    }
    out
}
