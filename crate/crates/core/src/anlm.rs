//! Approximate non-local means with per-pixel patch size and strength.
//!
//! For every pixel the filter ranks all patch offsets inside a square
//! search window by patch distance on the guide image, keeps the best N,
//! converts their distances to exponential weights and averages the
//! corresponding target patches. The per-pixel parameters are the odd
//! patch size p0 and the strength multiplier p1; the weight of a neighbor
//! at squared patch distance d2 is
//!
//! ```text
//! w = exp(-max(d2 / (p0^2 * channels) - 2 sigma^2, 0) / (p1 * sigma)^2)
//! ```
//!
//! with w = 1 when the numerator clamps to zero (exact matches always
//! count fully, including the self match, and sigma = 0 stays finite).
//! Weights are normalized to sum to one before averaging.
//!
//! Ranking all offsets exactly is the dominant cost, so a `NeighborIndex`
//! precomputes, per offset, summed-area tables of squared guide
//! differences. Those tables only shortlist candidates: every shortlisted
//! offset is re-measured with the direct per-patch summation (including a
//! guard band around the cut to absorb table rounding), so selections and
//! weights match a brute-force evaluation of the formulas above. Ties in
//! distance break toward the earlier offset in row-major window order.
//!
//! When the tables would exceed a memory budget the index streams one
//! offset at a time into bounded per-pixel shortlists instead; selections
//! are identical except in degenerate many-way-tie neighborhoods.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ParameterField;
use crate::raster::{mirror, RasterImage};

pub const DEFAULT_NEIGHBORS: usize = 16;
pub const DEFAULT_SEARCH_RADIUS: usize = 10;

/// Slack added to the shortlist cut so summed-area rounding can never
/// exclude a candidate the exact ranking would keep.
const SAT_GUARD: f64 = 1e-5;
/// Streaming mode keeps this many shortlist slots per pixel.
const STREAM_KEEP: usize = 32;
/// Row chunking for deterministic parallel accumulation.
const ROWS_PER_CHUNK: usize = 8;
/// Above this table footprint the index switches to streaming.
const CACHE_BUDGET_BYTES: usize = 320 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Each pixel takes only the weighted average of neighbor centers.
    CenterPixel,
    /// Whole denoised patches are accumulated and averaged per pixel.
    PatchAccumulate,
}

#[derive(Debug, Clone)]
pub struct AnlmConfig {
    pub neighbor_count: usize,
    pub search_radius: usize,
    /// Noise standard deviation on the [0, 1] intensity scale.
    pub sigma: f64,
    pub aggregation: Aggregation,
}

impl Default for AnlmConfig {
    fn default() -> Self {
        AnlmConfig {
            neighbor_count: DEFAULT_NEIGHBORS,
            search_radius: DEFAULT_SEARCH_RADIUS,
            sigma: 0.0,
            aggregation: Aggregation::PatchAccumulate,
        }
    }
}

impl AnlmConfig {
    fn check(&self) -> Result<()> {
        let window = 2 * self.search_radius + 1;
        if self.search_radius == 0 {
            return Err(Error::invalid("search radius must be positive"));
        }
        if self.neighbor_count == 0 || self.neighbor_count > window * window {
            return Err(Error::invalid(format!(
                "neighbor count {} outside 1..={}",
                self.neighbor_count,
                window * window
            )));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// One ranked patch offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchMatch {
    pub dx: i32,
    pub dy: i32,
    pub d2: f64,
}

/// Weight of a neighbor at squared patch distance `d2` for patch size
/// `p0`, `channels` guide channels, strength `p1` and noise level `sigma`.
#[inline]
pub fn anlm_weight(d2: f64, p0: f64, channels: f64, p1: f64, sigma: f64) -> f64 {
    let per_sample = d2 / (p0 * p0 * channels);
    let excess = (per_sample - 2.0 * sigma * sigma).max(0.0);
    if excess == 0.0 {
        1.0
    } else {
        let denom = (p1 * sigma) * (p1 * sigma);
        (-excess / denom).exp()
    }
}

/// Exhaustively ranks every offset in the search window by exact patch
/// distance on the guide and returns the best `neighbor_count`, distance
/// ascending, ties broken by row-major window order. Patch and window
/// positions past the border are mirrored.
pub fn find_neighbors(
    guide: &RasterImage,
    x: usize,
    y: usize,
    patch_size: usize,
    cfg: &AnlmConfig,
) -> Result<Vec<PatchMatch>> {
    cfg.check()?;
    check_patch_size(patch_size as f64)?;
    if x >= guide.width() || y >= guide.height() {
        return Err(Error::invalid(format!("pixel ({x}, {y}) outside the image")));
    }
    let r = cfg.search_radius as isize;
    let half = (patch_size / 2) as isize;
    let mut ranked: Vec<(f64, u32, i32, i32)> = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    let mut idx = 0u32;
    for dy in -r..=r {
        for dx in -r..=r {
            let mut d2 = 0.0;
            for py in -half..=half {
                for px in -half..=half {
                    for c in 0..guide.channels() {
                        let a = guide.get_mirrored(x as isize + px, y as isize + py, c);
                        let b = guide.get_mirrored(x as isize + dx + px, y as isize + dy + py, c);
                        let d = a - b;
                        d2 += d * d;
                    }
                }
            }
            ranked.push((d2, idx, dx as i32, dy as i32));
            idx += 1;
        }
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.truncate(cfg.neighbor_count);
    Ok(ranked.into_iter().map(|(d2, _, dx, dy)| PatchMatch { dx, dy, d2 }).collect())
}

fn check_patch_size(p0: f64) -> Result<()> {
    if p0 < 3.0 || p0.fract() != 0.0 || (p0 as i64) % 2 == 0 {
        return Err(Error::invalid(format!("patch size must be an odd integer >= 3, got {p0}")));
    }
    Ok(())
}

fn pad_plane(src: &[f64], w: usize, h: usize, margin: usize) -> Vec<f64> {
    let pw = w + 2 * margin;
    let ph = h + 2 * margin;
    let mut out = vec![0.0; pw * ph];
    for py in 0..ph {
        let sy = mirror(py as isize - margin as isize, h);
        for px in 0..pw {
            out[py * pw + px] = src[sy * w + mirror(px as isize - margin as isize, w)];
        }
    }
    out
}

/// Precomputed patch-distance accelerator for one guide image.
///
/// Reusable across many filter invocations (the trainer queries it once
/// per objective evaluation), and across patch sizes up to the half it
/// was built with.
pub struct NeighborIndex {
    width: usize,
    height: usize,
    channels: usize,
    radius: usize,
    half_max: usize,
    margin: usize,
    pw: usize,
    padded: Vec<Vec<f64>>,
    /// summed-area tables over the e-plane, one per offset, or None when
    /// the footprint exceeded the cache budget
    sats: Option<Vec<Vec<f64>>>,
    ew: usize,
    eh: usize,
}

impl NeighborIndex {
    pub fn build(guide: &RasterImage, radius: usize, half_max: usize) -> NeighborIndex {
        Self::build_with_budget(guide, radius, half_max, CACHE_BUDGET_BYTES)
    }

    pub fn build_with_budget(
        guide: &RasterImage,
        radius: usize,
        half_max: usize,
        budget_bytes: usize,
    ) -> NeighborIndex {
        let (w, h) = (guide.width(), guide.height());
        let margin = radius + half_max;
        let padded: Vec<Vec<f64>> =
            (0..guide.channels()).map(|c| pad_plane(guide.plane(c), w, h, margin)).collect();
        let ew = w + 2 * half_max;
        let eh = h + 2 * half_max;
        let side = 2 * radius + 1;
        let offsets = side * side;
        let sat_bytes = offsets * (ew + 1) * (eh + 1) * std::mem::size_of::<f64>();
        let mut index = NeighborIndex {
            width: w,
            height: h,
            channels: guide.channels(),
            radius,
            half_max,
            margin,
            pw: w + 2 * margin,
            padded,
            sats: None,
            ew,
            eh,
        };
        if sat_bytes <= budget_bytes {
            let tables: Vec<Vec<f64>> = (0..offsets)
                .into_par_iter()
                .map(|idx| {
                    let (dx, dy) = index.offset_of(idx);
                    index.build_sat(dx, dy)
                })
                .collect();
            index.sats = Some(tables);
        }
        index
    }

    #[inline]
    fn offset_of(&self, idx: usize) -> (isize, isize) {
        let side = 2 * self.radius + 1;
        let dy = (idx / side) as isize - self.radius as isize;
        let dx = (idx % side) as isize - self.radius as isize;
        (dx, dy)
    }

    #[inline]
    fn offset_count(&self) -> usize {
        let side = 2 * self.radius + 1;
        side * side
    }

    /// Squared guide difference plane for one offset, summed over channels,
    /// in e-plane coordinates (image extended by half_max on each side).
    fn build_e_plane(&self, dx: isize, dy: isize) -> Vec<f64> {
        let (ew, eh) = (self.ew, self.eh);
        let r = self.radius as isize;
        let pw = self.pw;
        let mut e = vec![0.0; ew * eh];
        for plane in &self.padded {
            for ey in 0..eh {
                let base_a = (ey as isize + r) * pw as isize + r;
                let base_b = (ey as isize + r + dy) * pw as isize + r + dx;
                let row = &mut e[ey * ew..(ey + 1) * ew];
                for (ex, out) in row.iter_mut().enumerate() {
                    let a = plane[(base_a + ex as isize) as usize];
                    let b = plane[(base_b + ex as isize) as usize];
                    let d = a - b;
                    *out += d * d;
                }
            }
        }
        e
    }

    fn build_sat(&self, dx: isize, dy: isize) -> Vec<f64> {
        let e = self.build_e_plane(dx, dy);
        let (ew, eh) = (self.ew, self.eh);
        let sw = ew + 1;
        let mut sat = vec![0.0; sw * (eh + 1)];
        for y in 0..eh {
            let mut row_sum = 0.0;
            for x in 0..ew {
                row_sum += e[y * ew + x];
                sat[(y + 1) * sw + x + 1] = sat[y * sw + x + 1] + row_sum;
            }
        }
        sat
    }

    /// Table estimate of the patch distance at pixel (x, y) for the given
    /// patch half. Used only to shortlist; exact values come from
    /// `exact_d2`.
    #[inline]
    fn sat_d2(&self, sat: &[f64], x: usize, y: usize, half: usize) -> f64 {
        let sw = self.ew + 1;
        let x0 = x + self.half_max - half;
        let y0 = y + self.half_max - half;
        let x1 = x + self.half_max + half + 1;
        let y1 = y + self.half_max + half + 1;
        sat[y1 * sw + x1] - sat[y0 * sw + x1] - sat[y1 * sw + x0] + sat[y0 * sw + x0]
    }

    /// Direct patch distance over the padded guide, matching the
    /// brute-force definition term for term: rows, then columns, then
    /// channels, so values agree bitwise with `find_neighbors`.
    fn exact_d2(&self, x: usize, y: usize, dx: isize, dy: isize, half: usize) -> f64 {
        let m = self.margin as isize;
        let pw = self.pw as isize;
        let mut d2 = 0.0;
        for py in -(half as isize)..=(half as isize) {
            let row_a = (y as isize + m + py) * pw + x as isize + m - half as isize;
            let row_b = (y as isize + m + dy + py) * pw + x as isize + m + dx - half as isize;
            for px in 0..(2 * half + 1) as isize {
                for plane in &self.padded {
                    let d = plane[(row_a + px) as usize] - plane[(row_b + px) as usize];
                    d2 += d * d;
                }
            }
        }
        d2
    }

    /// Exact best-n selection for one pixel: shortlist with the tables
    /// (plus guard band), then re-rank the shortlist by exact distance.
    fn select(&self, x: usize, y: usize, half: usize, n: usize, scratch: &mut SelectScratch) -> usize {
        scratch.shortlist.clear();
        match &self.sats {
            Some(tables) => {
                scratch.sat_values.clear();
                for sat in tables {
                    scratch.sat_values.push(self.sat_d2(sat, x, y, half));
                }
                scratch.order.clear();
                scratch.order.extend(0..tables.len() as u32);
                let nth = n.min(tables.len()) - 1;
                scratch.order.select_nth_unstable_by(nth, |&a, &b| {
                    scratch.sat_values[a as usize].total_cmp(&scratch.sat_values[b as usize])
                });
                let cut = scratch.sat_values[scratch.order[nth] as usize] + SAT_GUARD;
                for (idx, &sv) in scratch.sat_values.iter().enumerate() {
                    if sv <= cut {
                        scratch.shortlist.push(idx as u32);
                    }
                }
            }
            None => {
                let kept = &scratch.streamed.as_ref().expect("streaming shortlists present")
                    [y * self.width + x];
                let nth = n.min(kept.len).saturating_sub(1);
                let cut = kept.sat[nth] + SAT_GUARD;
                for i in 0..kept.len {
                    if kept.sat[i] <= cut {
                        scratch.shortlist.push(kept.idx[i] as u32);
                    }
                }
                scratch.shortlist.sort_unstable();
            }
        }
        scratch.ranked.clear();
        for &idx in &scratch.shortlist {
            let (dx, dy) = self.offset_of(idx as usize);
            scratch.ranked.push((self.exact_d2(x, y, dx, dy, half), idx));
        }
        scratch.ranked.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let take = n.min(scratch.ranked.len());
        scratch.ranked.truncate(take);
        take
    }

    /// Streaming fallback: visit offsets one table at a time and keep a
    /// bounded per-pixel shortlist.
    fn stream_shortlists(&self, halves: &[usize]) -> Vec<StreamSet> {
        let mut kept = vec![StreamSet::new(); self.width * self.height];
        for idx in 0..self.offset_count() {
            let (dx, dy) = self.offset_of(idx);
            let sat = self.build_sat(dx, dy);
            kept.par_chunks_mut(self.width).enumerate().for_each(|(y, row)| {
                for (x, set) in row.iter_mut().enumerate() {
                    let sv = self.sat_d2(&sat, x, y, halves[y * self.width + x]);
                    set.insert(sv, idx as u16);
                }
            });
        }
        kept
    }

    /// Ranked matches for a single pixel, mainly for inspection and tests.
    pub fn neighbors_at(&self, x: usize, y: usize, patch_size: usize, n: usize) -> Result<Vec<PatchMatch>> {
        check_patch_size(patch_size as f64)?;
        let half = patch_size / 2;
        if half > self.half_max {
            return Err(Error::invalid(format!(
                "patch size {patch_size} exceeds the index limit {}",
                2 * self.half_max + 1
            )));
        }
        if x >= self.width || y >= self.height {
            return Err(Error::invalid(format!("pixel ({x}, {y}) outside the image")));
        }
        let mut scratch = SelectScratch::new(self.offset_count());
        if self.sats.is_none() {
            let halves = vec![half; self.width * self.height];
            scratch.streamed = Some(self.stream_shortlists(&halves));
        }
        let take = self.select(x, y, half, n, &mut scratch);
        Ok(scratch.ranked[..take]
            .iter()
            .map(|&(d2, idx)| {
                let (dx, dy) = self.offset_of(idx as usize);
                PatchMatch { dx: dx as i32, dy: dy as i32, d2 }
            })
            .collect())
    }
}

/// Bounded (sat, idx) shortlist kept sorted ascending, used in streaming
/// mode. Insertion order is offset order, so equal distances keep the
/// earlier offset first.
#[derive(Clone)]
struct StreamSet {
    sat: [f64; STREAM_KEEP],
    idx: [u16; STREAM_KEEP],
    len: usize,
}

impl StreamSet {
    fn new() -> Self {
        StreamSet { sat: [f64::INFINITY; STREAM_KEEP], idx: [0; STREAM_KEEP], len: 0 }
    }

    #[inline]
    fn insert(&mut self, sat: f64, idx: u16) {
        if self.len == STREAM_KEEP && sat >= self.sat[STREAM_KEEP - 1] {
            return;
        }
        let mut pos = self.len.min(STREAM_KEEP - 1);
        while pos > 0 && self.sat[pos - 1] > sat {
            self.sat[pos] = self.sat[pos - 1];
            self.idx[pos] = self.idx[pos - 1];
            pos -= 1;
        }
        self.sat[pos] = sat;
        self.idx[pos] = idx;
        if self.len < STREAM_KEEP {
            self.len += 1;
        }
    }
}

struct SelectScratch {
    sat_values: Vec<f64>,
    order: Vec<u32>,
    shortlist: Vec<u32>,
    ranked: Vec<(f64, u32)>,
    streamed: Option<Vec<StreamSet>>,
}

impl SelectScratch {
    fn new(offsets: usize) -> Self {
        SelectScratch {
            sat_values: Vec::with_capacity(offsets),
            order: Vec::with_capacity(offsets),
            shortlist: Vec::with_capacity(offsets),
            ranked: Vec::with_capacity(offsets),
            streamed: None,
        }
    }
}

struct ChunkBand {
    y0: usize,
    rows: usize,
    planes: Vec<Vec<f64>>,
    counts: Vec<f64>,
}

/// Core filtering loop shared by image denoising and feature-plane
/// filtering. Targets are arbitrary planes sharing the guide's geometry;
/// the output is not range-clamped.
fn run_filter(
    index: &NeighborIndex,
    targets: &[&[f64]],
    p0_plane: &[f64],
    p1_plane: &[f64],
    cfg: &AnlmConfig,
) -> Result<Vec<Vec<f64>>> {
    let (w, h) = (index.width, index.height);
    let n = cfg.neighbor_count;
    if n > index.offset_count() {
        return Err(Error::invalid(format!(
            "neighbor count {n} exceeds the window's {} offsets",
            index.offset_count()
        )));
    }
    let mut halves = vec![0usize; w * h];
    for (i, &p0) in p0_plane.iter().enumerate() {
        check_patch_size(p0)?;
        let half = (p0 as usize) / 2;
        if half > index.half_max {
            return Err(Error::invalid(format!(
                "patch size {p0} exceeds the index limit {}",
                2 * index.half_max + 1
            )));
        }
        halves[i] = half;
    }
    if p1_plane.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid("strength parameter must be positive"));
    }

    let margin = index.margin;
    let pw = index.pw;
    let padded_targets: Vec<Vec<f64>> =
        targets.iter().map(|t| pad_plane(t, w, h, margin)).collect();

    let streamed = if index.sats.is_none() { Some(index.stream_shortlists(&halves)) } else { None };

    let chunk_count = h.div_ceil(ROWS_PER_CHUNK);
    let channels_f = index.channels as f64;
    let bands: Vec<ChunkBand> = (0..chunk_count)
        .into_par_iter()
        .map(|chunk| {
            let y_start = chunk * ROWS_PER_CHUNK;
            let y_end = (y_start + ROWS_PER_CHUNK).min(h);
            let band_y0 = y_start.saturating_sub(index.half_max);
            let band_y1 = (y_end + index.half_max).min(h);
            let band_rows = band_y1 - band_y0;
            let mut band = ChunkBand {
                y0: band_y0,
                rows: band_rows,
                planes: vec![vec![0.0; band_rows * w]; targets.len()],
                counts: vec![0.0; band_rows * w],
            };
            let mut scratch = SelectScratch::new(index.offset_count());
            scratch.streamed = None;
            let mut patch_buf = vec![0.0f64; (2 * index.half_max + 1) * (2 * index.half_max + 1)];
            let mut weights: Vec<f64> = Vec::with_capacity(n);

            for y in y_start..y_end {
                for x in 0..w {
                    let pix = y * w + x;
                    let half = halves[pix];
                    let take = match &streamed {
                        Some(sets) => {
                            // borrow dance: select() reads streamed sets from scratch
                            scratch.shortlist.clear();
                            let kept = &sets[pix];
                            let nth = n.min(kept.len).saturating_sub(1);
                            let cut = kept.sat[nth] + SAT_GUARD;
                            for i in 0..kept.len {
                                if kept.sat[i] <= cut {
                                    scratch.shortlist.push(kept.idx[i] as u32);
                                }
                            }
                            scratch.shortlist.sort_unstable();
                            scratch.ranked.clear();
                            for &idx in &scratch.shortlist {
                                let (dx, dy) = index.offset_of(idx as usize);
                                scratch.ranked.push((index.exact_d2(x, y, dx, dy, half), idx));
                            }
                            scratch.ranked.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                            let take = n.min(scratch.ranked.len());
                            scratch.ranked.truncate(take);
                            take
                        }
                        None => index.select(x, y, half, n, &mut scratch),
                    };

                    let p0 = p0_plane[pix];
                    let p1 = p1_plane[pix];
                    weights.clear();
                    let mut wsum = 0.0;
                    for &(d2, _) in &scratch.ranked[..take] {
                        let wj = anlm_weight(d2, p0, channels_f, p1, cfg.sigma);
                        weights.push(wj);
                        wsum += wj;
                    }

                    match cfg.aggregation {
                        Aggregation::CenterPixel => {
                            for (t, plane) in padded_targets.iter().enumerate() {
                                let mut acc = 0.0;
                                for (j, &(_, idx)) in scratch.ranked[..take].iter().enumerate() {
                                    let (dx, dy) = index.offset_of(idx as usize);
                                    let py = (y as isize + margin as isize + dy) as usize;
                                    let px = (x as isize + margin as isize + dx) as usize;
                                    acc += weights[j] * plane[py * pw + px];
                                }
                                let row = y - band.y0;
                                band.planes[t][row * w + x] = acc / wsum;
                            }
                            let row = y - band.y0;
                            band.counts[row * w + x] = 1.0;
                        }
                        Aggregation::PatchAccumulate => {
                            let side = 2 * half + 1;
                            for (t, plane) in padded_targets.iter().enumerate() {
                                patch_buf[..side * side].fill(0.0);
                                for (j, &(_, idx)) in scratch.ranked[..take].iter().enumerate() {
                                    let (dx, dy) = index.offset_of(idx as usize);
                                    let wj = weights[j];
                                    for uy in 0..side {
                                        let py = (y as isize + margin as isize + dy + uy as isize
                                            - half as isize) as usize;
                                        let row_base =
                                            py * pw + (x as isize + margin as isize + dx - half as isize) as usize;
                                        for ux in 0..side {
                                            patch_buf[uy * side + ux] += wj * plane[row_base + ux];
                                        }
                                    }
                                }
                                for uy in 0..side {
                                    let ay = y as isize + uy as isize - half as isize;
                                    if ay < band.y0 as isize || ay >= (band.y0 + band.rows) as isize {
                                        continue;
                                    }
                                    let row = ay as usize - band.y0;
                                    for ux in 0..side {
                                        let ax = x as isize + ux as isize - half as isize;
                                        if ax < 0 || ax >= w as isize {
                                            continue;
                                        }
                                        band.planes[t][row * w + ax as usize] +=
                                            patch_buf[uy * side + ux] / wsum;
                                        if t == 0 {
                                            band.counts[row * w + ax as usize] += 1.0;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            band
        })
        .collect();

    // merge bands in chunk order so the accumulation order is fixed
    let mut acc: Vec<Vec<f64>> = vec![vec![0.0; w * h]; targets.len()];
    let mut counts = vec![0.0f64; w * h];
    for band in &bands {
        for t in 0..targets.len() {
            for row in 0..band.rows {
                let dst = (band.y0 + row) * w;
                let src = row * w;
                for xcol in 0..w {
                    acc[t][dst + xcol] += band.planes[t][src + xcol];
                }
            }
        }
        for row in 0..band.rows {
            let dst = (band.y0 + row) * w;
            for xcol in 0..w {
                counts[dst + xcol] += band.counts[row * w + xcol];
            }
        }
    }
    for plane in &mut acc {
        for (v, &cnt) in plane.iter_mut().zip(&counts) {
            debug_assert!(cnt >= 1.0);
            *v /= cnt;
        }
    }
    Ok(acc)
}

fn check_field(img: &RasterImage, field: &ParameterField) -> Result<()> {
    if field.width() != img.width() || field.height() != img.height() {
        return Err(Error::shape("parameter field and image sizes differ"));
    }
    if field.param_count() != 2 {
        return Err(Error::invalid(format!(
            "denoising expects 2 parameter planes (patch size, strength), got {}",
            field.param_count()
        )));
    }
    Ok(())
}

fn max_half(p0_plane: &[f64]) -> Result<usize> {
    let mut max = 3.0f64;
    for &v in p0_plane {
        check_patch_size(v)?;
        max = max.max(v);
    }
    Ok((max as usize) / 2)
}

/// Denoises an image with per-pixel parameters. The image is its own
/// guide: patch distances are measured on the noisy input.
pub fn denoise(img: &RasterImage, field: &ParameterField, cfg: &AnlmConfig) -> Result<RasterImage> {
    cfg.check()?;
    check_field(img, field)?;
    let index = NeighborIndex::build(img, cfg.search_radius, max_half(field.plane(0))?);
    denoise_with_index(img, field, cfg, &index)
}

/// Like `denoise`, reusing a prebuilt index for the same guide image.
pub fn denoise_with_index(
    img: &RasterImage,
    field: &ParameterField,
    cfg: &AnlmConfig,
    index: &NeighborIndex,
) -> Result<RasterImage> {
    cfg.check()?;
    check_field(img, field)?;
    if index.width != img.width() || index.height != img.height() || index.channels != img.channels() {
        return Err(Error::shape("index geometry does not match the image"));
    }
    if index.radius != cfg.search_radius {
        return Err(Error::invalid("index search radius differs from the config"));
    }
    let targets: Vec<&[f64]> = (0..img.channels()).map(|c| img.plane(c)).collect();
    let planes = run_filter(index, &targets, field.plane(0), field.plane(1), cfg)?;
    let mut samples = Vec::with_capacity(img.samples().len());
    for plane in planes {
        samples.extend(plane.into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    RasterImage::from_samples(img.width(), img.height(), img.channels(), samples)
}

/// Denoises with one global (patch size, strength) pair.
pub fn denoise_global(img: &RasterImage, p0: f64, p1: f64, cfg: &AnlmConfig) -> Result<RasterImage> {
    let field = ParameterField::constant(img.width(), img.height(), &[p0, p1]);
    denoise(img, &field, cfg)
}

/// NLM-filters arbitrary planes using patch matches found on the guide
/// image, with one global (patch size, strength) pair. Outputs are not
/// clamped. Used to clean feature maps before model fitting.
pub fn filter_planes_with_guide(
    guide: &RasterImage,
    planes: &[&[f64]],
    p0: f64,
    p1: f64,
    sigma: f64,
    cfg: &AnlmConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut cfg = cfg.clone();
    cfg.sigma = sigma;
    cfg.check()?;
    check_patch_size(p0)?;
    let n = guide.width() * guide.height();
    for p in planes {
        if p.len() != n {
            return Err(Error::shape("feature plane size does not match the guide"));
        }
    }
    let index = NeighborIndex::build(guide, cfg.search_radius, (p0 as usize) / 2);
    let p0_plane = vec![p0; n];
    let p1_plane = vec![p1; n];
    run_filter(&index, planes, &p0_plane, &p1_plane, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseRng;

    fn random_image(seed: u64, w: usize, h: usize, c: usize) -> RasterImage {
        let mut rng = NoiseRng::from_seed(seed);
        let samples = (0..w * h * c).map(|_| rng.next_f64()).collect();
        RasterImage::from_samples(w, h, c, samples).unwrap()
    }

    fn small_cfg(sigma: f64) -> AnlmConfig {
        AnlmConfig { neighbor_count: 8, search_radius: 4, sigma, aggregation: Aggregation::PatchAccumulate }
    }

    #[test]
    fn weight_function_edges() {
        // self match is always 1
        assert_eq!(anlm_weight(0.0, 5.0, 3.0, 0.4, 0.1), 1.0);
        // below the noise floor still 1
        let below = 2.0 * 0.1 * 0.1 * 5.0 * 5.0 * 3.0 * 0.99;
        assert_eq!(anlm_weight(below, 5.0, 3.0, 0.4, 0.1), 1.0);
        // sigma 0: any positive distance gives weight 0, zero distance 1
        assert_eq!(anlm_weight(1e-12, 5.0, 3.0, 0.4, 0.0), 0.0);
        assert_eq!(anlm_weight(0.0, 5.0, 3.0, 0.4, 0.0), 1.0);
        // monotone decreasing past the floor (floor here is d2 = 1.5)
        let w1 = anlm_weight(3.0, 5.0, 3.0, 0.4, 0.1);
        let w2 = anlm_weight(6.0, 5.0, 3.0, 0.4, 0.1);
        assert!(w1 > w2 && w2 > 0.0);
    }

    #[test]
    fn find_neighbors_puts_self_first() {
        let img = random_image(1, 16, 16, 3);
        let cfg = small_cfg(0.1);
        let matches = find_neighbors(&img, 8, 8, 5, &cfg).unwrap();
        assert_eq!(matches.len(), 8);
        assert_eq!((matches[0].dx, matches[0].dy, matches[0].d2), (0, 0, 0.0));
        for w in matches.windows(2) {
            assert!(w[0].d2 <= w[1].d2);
        }
    }

    #[test]
    fn exact_ties_break_in_window_order() {
        // a 2-periodic pattern makes every offset with even dx and dy an
        // exact duplicate; those ties must come back in row-major order
        let mut img = RasterImage::new(17, 17, 1).unwrap();
        for y in 0..17 {
            for x in 0..17 {
                img.set(x, y, 0, if (x + y) % 2 == 0 { 0.25 } else { 0.75 });
            }
        }
        let cfg = AnlmConfig { neighbor_count: 6, search_radius: 3, sigma: 0.1, ..Default::default() };
        let matches = find_neighbors(&img, 8, 8, 3, &cfg).unwrap();
        let zero: Vec<(i32, i32)> =
            matches.iter().filter(|m| m.d2 == 0.0).map(|m| (m.dx, m.dy)).collect();
        // the tied offsets are those with even coordinate sums, and they
        // must come back scanned dy then dx across the 7x7 window
        assert_eq!(zero[0], (-3, -3));
        assert_eq!(zero[1], (-1, -3));
        assert_eq!(zero[2], (1, -3));
        let idx_of = |dx: i32, dy: i32| (dy + 3) * 7 + dx + 3;
        for w in zero.windows(2) {
            assert!(idx_of(w[0].0, w[0].1) < idx_of(w[1].0, w[1].1));
        }
    }

    #[test]
    fn index_selection_matches_exhaustive_scan() {
        let img = random_image(7, 20, 14, 3);
        let cfg = small_cfg(0.15);
        let index = NeighborIndex::build(&img, cfg.search_radius, 2);
        for (x, y) in [(0usize, 0usize), (1, 13), (10, 7), (19, 0), (5, 5)] {
            let direct = find_neighbors(&img, x, y, 5, &cfg).unwrap();
            let fast = index.neighbors_at(x, y, 5, cfg.neighbor_count).unwrap();
            assert_eq!(direct.len(), fast.len());
            for (d, f) in direct.iter().zip(&fast) {
                assert_eq!((d.dx, d.dy), (f.dx, f.dy), "at ({x},{y})");
                assert!((d.d2 - f.d2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn streaming_and_cached_modes_agree() {
        let img = random_image(9, 18, 18, 1);
        let cfg = small_cfg(0.1);
        let field = ParameterField::constant(18, 18, &[5.0, 0.4]);
        let cached = NeighborIndex::build_with_budget(&img, cfg.search_radius, 2, usize::MAX);
        let streamed = NeighborIndex::build_with_budget(&img, cfg.search_radius, 2, 0);
        assert!(cached.sats.is_some());
        assert!(streamed.sats.is_none());
        let a = denoise_with_index(&img, &field, &cfg, &cached).unwrap();
        let b = denoise_with_index(&img, &field, &cfg, &streamed).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn constant_image_is_reproduced_exactly() {
        let img = RasterImage::constant(15, 12, 3, 0.6).unwrap();
        for aggregation in [Aggregation::CenterPixel, Aggregation::PatchAccumulate] {
            let cfg = AnlmConfig { aggregation, ..small_cfg(0.1) };
            let out = denoise_global(&img, 5.0, 0.4, &cfg).unwrap();
            for v in out.samples() {
                assert!((v - 0.6).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_sigma_on_clean_image_is_near_identity() {
        let img = random_image(21, 16, 16, 1);
        let cfg = small_cfg(0.0);
        let out = denoise_global(&img, 5.0, 0.4, &cfg).unwrap();
        for (a, b) in out.samples().iter().zip(img.samples()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn global_equals_constant_field() {
        let img = random_image(3, 14, 11, 3);
        let cfg = small_cfg(0.12);
        let field = ParameterField::constant(14, 11, &[7.0, 0.8]);
        let a = denoise_global(&img, 7.0, 0.8, &cfg).unwrap();
        let b = denoise(&img, &field, &cfg).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn feature_plane_filtering_handles_sigma_zero() {
        let guide = random_image(31, 14, 14, 1);
        let plane: Vec<f64> = guide.plane(0).iter().map(|v| v * 2.0 + 1.0).collect();
        let out = filter_planes_with_guide(&guide, &[&plane], 5.0, 0.4, 0.0, &small_cfg(0.0)).unwrap();
        // clean guide, sigma 0: only exact self matches survive, so the
        // plane comes back essentially unchanged (and unclamped)
        for (a, b) in out[0].iter().zip(&plane) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let img = random_image(4, 12, 12, 1);
        let cfg = small_cfg(0.1);
        assert!(denoise_global(&img, 4.0, 0.4, &cfg).is_err(), "even patch");
        assert!(denoise_global(&img, 5.5, 0.4, &cfg).is_err(), "fractional patch");
        assert!(denoise_global(&img, 5.0, 0.0, &cfg).is_err(), "zero strength");
        let bad = AnlmConfig { neighbor_count: 0, ..cfg.clone() };
        assert!(denoise_global(&img, 5.0, 0.4, &bad).is_err());
        let bad = AnlmConfig { neighbor_count: 1000, search_radius: 2, ..cfg.clone() };
        assert!(denoise_global(&img, 5.0, 0.4, &bad).is_err());
        let field = ParameterField::constant(9, 9, &[5.0, 0.4]);
        assert!(denoise(&img, &field, &cfg).is_err(), "field size mismatch");
    }

    #[test]
    fn variable_patch_sizes_run_and_stay_in_range() {
        let img = random_image(17, 20, 20, 1);
        let cfg = small_cfg(0.2);
        let mut field = ParameterField::constant(20, 20, &[3.0, 0.5]);
        for y in 0..20 {
            for x in 0..20 {
                let p0 = if (x + y) % 3 == 0 { 7.0 } else { 3.0 };
                field.set(x, y, 0, p0);
            }
        }
        let out = denoise(&img, &field, &cfg).unwrap();
        assert!(out.samples().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
