//! Bayer demosaicing and per-pixel convex blending of demosaicer outputs.
//!
//! Three built-in demosaicers cover a quality spread: plain bilinear
//! interpolation, bilinear with a cross-channel gradient correction, and
//! an edge-directed method that interpolates green along the axis of
//! least change and the chroma differences bilinearly. All three preserve
//! the measured CFA samples exactly.
//!
//! `blend` mixes any number of equally shaped outputs with per-pixel
//! weights p^k in [0, 1]; the output is the weighted mean with weights
//! p^k / sum(p), falling back to uniform weights where the sum underflows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features;
use crate::model::{ParamMapperModel, ParameterField, ProcessorKind};
use crate::raster::{mirror, BayerMosaic, CfaLayout, RasterImage};

/// Weight sums below this fall back to uniform blending.
pub const BLEND_SUM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemosaicerId {
    Bilinear,
    GradientCorrected,
    EdgeDirected,
}

impl DemosaicerId {
    /// The built-ins in their canonical blending order.
    pub fn all() -> [DemosaicerId; 3] {
        [DemosaicerId::Bilinear, DemosaicerId::GradientCorrected, DemosaicerId::EdgeDirected]
    }

    pub fn name(&self) -> &'static str {
        match self {
            DemosaicerId::Bilinear => "bilinear",
            DemosaicerId::GradientCorrected => "gradient-corrected",
            DemosaicerId::EdgeDirected => "edge-directed",
        }
    }
}

impl std::fmt::Display for DemosaicerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DemosaicerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(DemosaicerId::Bilinear),
            "gradient-corrected" => Ok(DemosaicerId::GradientCorrected),
            "edge-directed" => Ok(DemosaicerId::EdgeDirected),
            other => Err(Error::invalid(format!(
                "unknown demosaicer '{other}' (bilinear, gradient-corrected, edge-directed)"
            ))),
        }
    }
}

const N4: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
const DIAG: [(isize, isize); 4] = [(-1, -1), (1, -1), (-1, 1), (1, 1)];

/// Average of the mirrored `values` samples at neighbor sites whose CFA
/// color is `c`, preferring the 4-connected ring and falling back to the
/// diagonals. Site colors follow the unmirrored positions; reflection
/// preserves parity, so the mirrored sample really has that color.
fn same_color_neighbor_avg(
    values: &[f64],
    w: usize,
    h: usize,
    layout: CfaLayout,
    x: usize,
    y: usize,
    c: usize,
) -> f64 {
    for ring in [&N4, &DIAG] {
        let mut sum = 0.0;
        let mut count = 0;
        for &(dx, dy) in ring.iter() {
            let sx = x as isize + dx;
            let sy = y as isize + dy;
            if layout.color_at_signed(sx, sy) == c {
                sum += values[mirror(sy, h) * w + mirror(sx, w)];
                count += 1;
            }
        }
        if count > 0 {
            return sum / count as f64;
        }
    }
    // unreachable for Bayer layouts: every color appears in one ring
    values[y * w + x]
}

/// Fills channel `c` everywhere from samples measured at c-sites only.
fn interpolate_channel(values: &[f64], w: usize, h: usize, layout: CfaLayout, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, slot) in row.iter_mut().enumerate() {
            *slot = if layout.color_at(x, y) == c {
                values[y * w + x]
            } else {
                same_color_neighbor_avg(values, w, h, layout, x, y, c)
            };
        }
    });
    out
}

fn bilinear(m: &BayerMosaic) -> RasterImage {
    let (w, h) = (m.width(), m.height());
    let mut samples = Vec::with_capacity(w * h * 3);
    for c in 0..3 {
        samples.extend(interpolate_channel(m.samples(), w, h, m.layout(), c));
    }
    for v in samples.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    RasterImage::from_samples(w, h, 3, samples).expect("demosaicer output in range")
}

/// Bilinear estimate corrected by the center channel's 5-point Laplacian,
/// with per color-pair gains: 1/2 for green at red/blue sites, 5/8 for
/// red/blue at green sites, 3/4 for red at blue sites and vice versa.
fn gradient_corrected(m: &BayerMosaic) -> RasterImage {
    let (w, h) = (m.width(), m.height());
    let base = bilinear(m);
    let layout = m.layout();

    let rows: Vec<Vec<[f64; 3]>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w);
            for x in 0..w {
                let cc = layout.color_at(x, y);
                let v = m.get(x, y);
                let mut cross = 0.0;
                for (dx, dy) in [(-2isize, 0isize), (2, 0), (0, -2), (0, 2)] {
                    cross += m.get_mirrored(x as isize + dx, y as isize + dy);
                }
                let delta = v - cross / 4.0;
                let mut px = [0.0; 3];
                for (c, out) in px.iter_mut().enumerate() {
                    *out = if c == cc {
                        v
                    } else {
                        let gain = match (c, cc) {
                            (1, 0) | (1, 2) => 0.5,
                            (0, 1) | (2, 1) => 0.625,
                            _ => 0.75,
                        };
                        (base.get(x, y, c) + gain * delta).clamp(0.0, 1.0)
                    };
                }
                row.push(px);
            }
            row
        })
        .collect();

    let mut samples = vec![0.0; w * h * 3];
    for (y, row) in rows.iter().enumerate() {
        for (x, px) in row.iter().enumerate() {
            for (c, &value) in px.iter().enumerate() {
                samples[c * w * h + y * w + x] = value;
            }
        }
    }
    RasterImage::from_samples(w, h, 3, samples).expect("demosaicer output in range")
}

/// Green along the lower-|difference| axis, then bilinear interpolation
/// of the chroma differences R - G and B - G.
fn edge_directed(m: &BayerMosaic) -> RasterImage {
    let (w, h) = (m.width(), m.height());
    let layout = m.layout();

    let mut green = vec![0.0; w * h];
    green.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, slot) in row.iter_mut().enumerate() {
            if layout.color_at(x, y) == 1 {
                *slot = m.get(x, y);
                continue;
            }
            // in any Bayer layout the 4-neighbors of a non-green site are
            // all green
            let gl = m.get_mirrored(x as isize - 1, y as isize);
            let gr = m.get_mirrored(x as isize + 1, y as isize);
            let gu = m.get_mirrored(x as isize, y as isize - 1);
            let gd = m.get_mirrored(x as isize, y as isize + 1);
            let dh = (gl - gr).abs();
            let dv = (gu - gd).abs();
            *slot = if dh < dv {
                0.5 * (gl + gr)
            } else if dv < dh {
                0.5 * (gu + gd)
            } else {
                0.25 * (gl + gr + gu + gd)
            };
        }
    });

    let mut samples = Vec::with_capacity(w * h * 3);
    for c in [0usize, 2] {
        let mut diff = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                if layout.color_at(x, y) == c {
                    diff[y * w + x] = m.get(x, y) - green[y * w + x];
                }
            }
        }
        let interp = interpolate_channel(&diff, w, h, layout, c);
        let mut plane: Vec<f64> = interp
            .iter()
            .zip(&green)
            .map(|(d, g)| (d + g).clamp(0.0, 1.0))
            .collect();
        // the measured samples must survive bit for bit, not via the
        // (m - g) + g round trip
        for y in 0..h {
            for x in 0..w {
                if layout.color_at(x, y) == c {
                    plane[y * w + x] = m.get(x, y);
                }
            }
        }
        samples.extend(plane);
    }
    let b = samples.split_off(w * h);
    samples.extend(green.iter().map(|v| v.clamp(0.0, 1.0)));
    samples.extend(b);
    RasterImage::from_samples(w, h, 3, samples).expect("demosaicer output in range")
}

pub fn demosaic(m: &BayerMosaic, id: DemosaicerId) -> Result<RasterImage> {
    Ok(match id {
        DemosaicerId::Bilinear => bilinear(m),
        DemosaicerId::GradientCorrected => gradient_corrected(m),
        DemosaicerId::EdgeDirected => edge_directed(m),
    })
}

/// Runs every requested demosaicer on the mosaic, in order.
pub fn demosaic_all(m: &BayerMosaic, ids: &[DemosaicerId]) -> Result<Vec<RasterImage>> {
    ids.iter().map(|id| demosaic(m, *id)).collect()
}

fn check_blend_inputs(outputs: &[&RasterImage], field: &ParameterField) -> Result<()> {
    if outputs.len() < 2 {
        return Err(Error::invalid("blending needs at least 2 outputs"));
    }
    let (w, h, c) = (outputs[0].width(), outputs[0].height(), outputs[0].channels());
    for img in outputs {
        if img.width() != w || img.height() != h || img.channels() != c {
            return Err(Error::shape("blend inputs must share one shape"));
        }
    }
    if field.width() != w || field.height() != h {
        return Err(Error::shape("blend field and images disagree on size"));
    }
    if field.param_count() != outputs.len() {
        return Err(Error::invalid(format!(
            "field carries {} weights for {} outputs",
            field.param_count(),
            outputs.len()
        )));
    }
    if field.values().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("blend weights must be non-negative"));
    }
    Ok(())
}

/// Per-pixel weighted mean of the outputs with weights p^k / sum(p);
/// pixels whose weights sum below `BLEND_SUM_FLOOR` use uniform weights.
pub fn blend(outputs: &[RasterImage], field: &ParameterField) -> Result<RasterImage> {
    let refs: Vec<&RasterImage> = outputs.iter().collect();
    check_blend_inputs(&refs, field)?;
    let (w, h, channels) = (outputs[0].width(), outputs[0].height(), outputs[0].channels());
    let p = outputs.len();
    let uniform = 1.0 / p as f64;
    let mut samples = vec![0.0; w * h * channels];

    for (c, chunk) in samples.chunks_mut(w * h).enumerate() {
        chunk.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            for (x, out) in row.iter_mut().enumerate() {
                let mut sum = 0.0;
                for k in 0..p {
                    sum += field.get(x, y, k);
                }
                let mut acc = 0.0;
                for (k, img) in outputs.iter().enumerate() {
                    let wk = if sum < BLEND_SUM_FLOOR { uniform } else { field.get(x, y, k) / sum };
                    acc += wk * img.get(x, y, c);
                }
                *out = acc.clamp(0.0, 1.0);
            }
        });
    }
    RasterImage::from_samples(w, h, channels, samples)
}

/// Demosaics with every listed algorithm and blends the outputs with the
/// per-pixel weights produced by the model from mosaic features.
pub fn blend_adaptive(
    m: &BayerMosaic,
    model: &ParamMapperModel,
    ids: &[DemosaicerId],
) -> Result<RasterImage> {
    let outputs = demosaic_all(m, ids)?;
    blend_adaptive_outputs(m, model, &outputs)
}

/// `blend_adaptive` over precomputed outputs (e.g. loaded from files).
pub fn blend_adaptive_outputs(
    m: &BayerMosaic,
    model: &ParamMapperModel,
    outputs: &[RasterImage],
) -> Result<RasterImage> {
    if model.processor != ProcessorKind::Blend {
        return Err(Error::invalid(format!(
            "model is for processor '{}', expected 'blend'",
            model.processor
        )));
    }
    if model.param_count() != outputs.len() {
        return Err(Error::invalid(format!(
            "model blends {} outputs, got {}",
            model.param_count(),
            outputs.len()
        )));
    }
    let raw = features::build_features_mosaic(m, &model.feature_spec)?;
    let field = model.map_field(&raw)?;
    blend(outputs, &field)
}

/// Renders normalized blending weights as an RGB image: channel k is
/// p^k / sum(p) (missing channels stay 0 when fewer than 3 weights).
pub fn blend_map_image(field: &ParameterField) -> Result<RasterImage> {
    let p = field.param_count();
    if p == 0 || p > 3 {
        return Err(Error::invalid(format!("blend maps render at most 3 weights, got {p}")));
    }
    let (w, h) = (field.width(), field.height());
    let uniform = 1.0 / p as f64;
    let mut samples = vec![0.0; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            for k in 0..p {
                sum += field.get(x, y, k);
            }
            for k in 0..p {
                let wk = if sum < BLEND_SUM_FLOOR { uniform } else { field.get(x, y, k) / sum };
                samples[k * w * h + y * w + x] = wk.clamp(0.0, 1.0);
            }
        }
    }
    RasterImage::from_samples(w, h, 3, samples)
}
