//! The learning loop: synthesizes degraded/reference pairs, wraps the
//! image-quality objective over packed model coefficients, fits the global
//! then the adaptive model and assembles evaluation reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anlm::{self, AnlmConfig, NeighborIndex};
use crate::demosaic::{self, DemosaicerId};
use crate::error::{Error, Result};
use crate::features::{self, FeatureMap, FeatureSpec, FeatureStat};
use crate::io;
use crate::metrics::{self, MetricId};
use crate::model::{
    CoefficientBlock, Discreteness, ParamMapperModel, ParamSpec, ParameterField, ProcessorKind,
    MODEL_FORMAT_VERSION,
};
use crate::noise::{self, NoiseRng};
use crate::raster::{mosaic, BayerMosaic, BlurKernel, CfaLayout, RasterImage};
use crate::simplex::{self, OptResult, SimplexOptions};
use crate::tv::{self, DeblurConfig};

/// Stock denoiser patch size, the baseline the optimizer starts from.
pub const DEFAULT_ANLM_PATCH: f64 = 5.0;
/// Stock denoiser strength.
pub const DEFAULT_ANLM_STRENGTH: f64 = 0.40;
/// Default training noise level on the [0, 1] scale (20 on 8-bit data).
pub const DEFAULT_TRAIN_SIGMA: f64 = 20.0 / 255.0;
/// Default blur for photon-limited runs.
pub const DEFAULT_BLUR_SIDE: usize = 7;
pub const DEFAULT_BLUR_SIGMA: f64 = 2.0;

fn default_neighbors() -> usize {
    anlm::DEFAULT_NEIGHBORS
}

fn default_search_radius() -> usize {
    anlm::DEFAULT_SEARCH_RADIUS
}

fn default_tv_iterations() -> usize {
    tv::DEFAULT_ITERATIONS
}

fn default_demosaicers() -> Vec<DemosaicerId> {
    DemosaicerId::all().to_vec()
}

/// How a reference image is corrupted into a training input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Degradation {
    /// Additive Gaussian noise; sigma lives on the [0, 1] intensity scale.
    Gaussian { sigma: f64 },
    /// Keep one CFA sample per pixel, no noise.
    Mosaic { layout: CfaLayout },
    /// Grayscale, blur, then photon-limited capture.
    PoissonBlur { kernel: KernelSpec, photon_max: f64 },
}

/// A blur kernel either synthesized or read from a kernel text file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelSpec {
    Gaussian { side: usize, sigma: f64 },
    File { path: PathBuf },
}

impl KernelSpec {
    pub fn build(&self) -> Result<BlurKernel> {
        match self {
            KernelSpec::Gaussian { side, sigma } => BlurKernel::gaussian(*side, *sigma),
            KernelSpec::File { path } => io::load_kernel(path),
        }
    }
}

/// Random square crops taken from each reference before degradation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub side: usize,
    /// Crops per image.
    pub count: usize,
    pub seed: u64,
}

/// One bounded processor parameter of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSpec {
    pub name: String,
    pub min: f64,
    pub max: f64,
    /// Snap mapped values to odd integers (patch sizes).
    #[serde(default)]
    pub odd: bool,
}

/// Processor-specific settings that are not learned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessorKnobs {
    #[serde(default = "default_neighbors")]
    pub anlm_neighbors: usize,
    #[serde(default = "default_search_radius")]
    pub anlm_search_radius: usize,
    #[serde(default = "default_tv_iterations")]
    pub tv_iterations: usize,
    #[serde(default = "default_demosaicers")]
    pub demosaicers: Vec<DemosaicerId>,
}

impl Default for ProcessorKnobs {
    fn default() -> Self {
        ProcessorKnobs {
            anlm_neighbors: default_neighbors(),
            anlm_search_radius: default_search_radius(),
            tv_iterations: default_tv_iterations(),
            demosaicers: default_demosaicers(),
        }
    }
}

/// Everything one training run depends on. Serializing this file pins the
/// run: the same config always yields the same pairs, objective values and
/// final models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub processor: ProcessorKind,
    /// The metric the optimizer maximizes.
    pub metric: MetricId,
    /// Reference image paths; the split lists index into this.
    pub dataset: Vec<PathBuf>,
    pub train_indices: Vec<usize>,
    #[serde(default)]
    pub test_indices: Vec<usize>,
    pub degradation: Degradation,
    /// Feature slots of the adaptive stage (the global stage is always
    /// constant-only).
    pub feature_spec: FeatureSpec,
    pub bounds: Vec<BoundSpec>,
    #[serde(default)]
    pub crop: Option<CropSpec>,
    #[serde(default)]
    pub simplex: SimplexOptions,
    pub seed: u64,
    #[serde(default)]
    pub knobs: ProcessorKnobs,
}

/// Stock bounds per processor; blend gets one weight per demosaicer.
pub fn default_bounds(processor: ProcessorKind, demosaicers: &[DemosaicerId]) -> Vec<BoundSpec> {
    match processor {
        ProcessorKind::Anlm => vec![
            BoundSpec { name: "patch_size".into(), min: 3.0, max: 21.0, odd: true },
            BoundSpec { name: "strength".into(), min: 0.05, max: 1.5, odd: false },
        ],
        ProcessorKind::Blend => demosaicers
            .iter()
            .map(|d| BoundSpec { name: format!("w_{}", d.name()), min: 0.0, max: 1.0, odd: false })
            .collect(),
        ProcessorKind::Tv => vec![BoundSpec { name: "tv_weight".into(), min: 1e-4, max: 5e-2, odd: false }],
    }
}

impl TrainingRun {
    /// A run with stock degradation, features, bounds and optimizer options
    /// for the processor.
    pub fn with_defaults(
        processor: ProcessorKind,
        dataset: Vec<PathBuf>,
        train_indices: Vec<usize>,
        test_indices: Vec<usize>,
        seed: u64,
    ) -> TrainingRun {
        let knobs = ProcessorKnobs::default();
        let degradation = match processor {
            ProcessorKind::Anlm => Degradation::Gaussian { sigma: DEFAULT_TRAIN_SIGMA },
            ProcessorKind::Blend => Degradation::Mosaic { layout: CfaLayout::Rggb },
            ProcessorKind::Tv => Degradation::PoissonBlur {
                kernel: KernelSpec::Gaussian { side: DEFAULT_BLUR_SIDE, sigma: DEFAULT_BLUR_SIGMA },
                photon_max: tv::DEFAULT_PHOTON_MAX,
            },
        };
        let feature_spec = match processor {
            ProcessorKind::Anlm => FeatureSpec::anlm_default(),
            ProcessorKind::Blend => FeatureSpec::blend_default(),
            ProcessorKind::Tv => FeatureSpec::tv_default(),
        };
        TrainingRun {
            processor,
            metric: MetricId::Psnr,
            dataset,
            train_indices,
            test_indices,
            degradation,
            feature_spec,
            bounds: default_bounds(processor, &knobs.demosaicers),
            crop: None,
            simplex: SimplexOptions { seed, ..SimplexOptions::default() },
            seed,
            knobs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_empty() {
            return Err(Error::invalid("a run needs at least one reference image"));
        }
        if self.train_indices.is_empty() {
            return Err(Error::invalid("the training split must not be empty"));
        }
        for &i in self.train_indices.iter().chain(&self.test_indices) {
            if i >= self.dataset.len() {
                return Err(Error::invalid(format!(
                    "split index {i} is out of range for a dataset of {}",
                    self.dataset.len()
                )));
            }
        }
        for list in [&self.train_indices, &self.test_indices] {
            let mut seen = list.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != list.len() {
                return Err(Error::invalid("split lists must not repeat an index"));
            }
        }
        if self.test_indices.iter().any(|t| self.train_indices.contains(t)) {
            return Err(Error::invalid("train and test splits must be disjoint"));
        }
        let degradation_fits = matches!(
            (self.processor, &self.degradation),
            (ProcessorKind::Anlm, Degradation::Gaussian { .. })
                | (ProcessorKind::Blend, Degradation::Mosaic { .. })
                | (ProcessorKind::Tv, Degradation::PoissonBlur { .. })
        );
        if !degradation_fits {
            return Err(Error::invalid(format!(
                "degradation mode does not match the '{}' processor",
                self.processor
            )));
        }
        match &self.degradation {
            Degradation::Gaussian { sigma } => {
                if !(*sigma >= 0.0) || !sigma.is_finite() {
                    return Err(Error::invalid("noise sigma must be non-negative"));
                }
            }
            Degradation::Mosaic { .. } => {}
            Degradation::PoissonBlur { photon_max, .. } => {
                if !(*photon_max >= 1.0) {
                    return Err(Error::invalid("photon_max must be >= 1"));
                }
            }
        }
        self.feature_spec.validate()?;
        let wants_mosaic_features = self.feature_spec.needs_mosaic();
        if wants_mosaic_features != matches!(self.processor, ProcessorKind::Blend)
            && !self.feature_spec.descriptors.is_empty()
        {
            return Err(Error::invalid(
                "Bayer-plane features require the blend processor and vice versa",
            ));
        }
        self.check_bounds()?;
        if let Some(c) = &self.crop {
            if c.count == 0 {
                return Err(Error::invalid("crop count must be >= 1"));
            }
            let max_window = self.feature_spec.descriptors.iter().map(|d| d.window).max().unwrap_or(3);
            if c.side < 4 * max_window {
                return Err(Error::invalid(format!(
                    "crop side {} is below four times the largest feature window ({max_window})",
                    c.side
                )));
            }
        }
        Ok(())
    }

    fn check_bounds(&self) -> Result<()> {
        for b in &self.bounds {
            if !(b.min.is_finite() && b.max.is_finite() && b.min < b.max) {
                return Err(Error::invalid(format!("parameter {:?} has invalid bounds", b.name)));
            }
        }
        match self.processor {
            ProcessorKind::Anlm => {
                if self.bounds.len() != 2 {
                    return Err(Error::invalid("the denoiser learns exactly two parameters"));
                }
                let patch = &self.bounds[0];
                let odd_int = |v: f64| v >= 3.0 && v.fract() == 0.0 && (v as i64) % 2 == 1;
                if !patch.odd || !odd_int(patch.min) || !odd_int(patch.max) {
                    return Err(Error::invalid(
                        "patch-size bounds must be odd integers >= 3 with odd snapping on",
                    ));
                }
                if !(self.bounds[1].min > 0.0) {
                    return Err(Error::invalid("the strength lower bound must be positive"));
                }
            }
            ProcessorKind::Blend => {
                if self.bounds.len() != self.knobs.demosaicers.len() || self.bounds.len() < 2 {
                    return Err(Error::invalid(
                        "blending needs one weight bound per demosaicer and at least two demosaicers",
                    ));
                }
                if self.bounds.iter().any(|b| b.min < 0.0 || b.max > 1.0) {
                    return Err(Error::invalid("blend weight bounds must lie inside [0, 1]"));
                }
            }
            ProcessorKind::Tv => {
                if self.bounds.len() != 1 {
                    return Err(Error::invalid("deblurring learns exactly one parameter"));
                }
                if !(self.bounds[0].min > 0.0) {
                    return Err(Error::invalid("the regularization weight must stay positive"));
                }
            }
        }
        if self.bounds.iter().any(|b| b.odd) && self.processor != ProcessorKind::Anlm {
            return Err(Error::invalid("only the denoiser uses odd-snapped parameters"));
        }
        Ok(())
    }
}

/// The corrupted side of a training pair.
#[derive(Debug, Clone)]
pub enum DegradedInput {
    Image(RasterImage),
    Mosaic(BayerMosaic),
}

impl DegradedInput {
    pub fn width(&self) -> usize {
        match self {
            DegradedInput::Image(i) => i.width(),
            DegradedInput::Mosaic(m) => m.width(),
        }
    }

    pub fn height(&self) -> usize {
        match self {
            DegradedInput::Image(i) => i.height(),
            DegradedInput::Mosaic(m) => m.height(),
        }
    }
}

/// One (input, reference) pair plus the seed of the noise stream that made
/// it.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub label: String,
    pub seed: u64,
    /// What the processor output is scored against (grayscale for
    /// deblurring runs).
    pub reference: RasterImage,
    pub input: DegradedInput,
}

/// Applies a degradation protocol to one reference. Returns the scoring
/// target and the corrupted input; deblurring targets the grayscale
/// rendition because the processor is single-channel.
pub fn degrade(
    reference: &RasterImage,
    degradation: &Degradation,
    rng: &mut NoiseRng,
) -> Result<(RasterImage, DegradedInput)> {
    let kernel = match degradation {
        Degradation::PoissonBlur { kernel, .. } => Some(kernel.build()?),
        _ => None,
    };
    degrade_with(reference, degradation, kernel.as_ref(), rng)
}

fn degrade_with(
    reference: &RasterImage,
    degradation: &Degradation,
    kernel: Option<&BlurKernel>,
    rng: &mut NoiseRng,
) -> Result<(RasterImage, DegradedInput)> {
    match degradation {
        Degradation::Gaussian { sigma } => {
            let noisy = noise::add_gaussian_noise(reference, *sigma, rng)?;
            Ok((reference.clone(), DegradedInput::Image(noisy)))
        }
        Degradation::Mosaic { layout } => {
            if reference.channels() != 3 {
                return Err(Error::invalid("mosaic degradation needs RGB references"));
            }
            let m = mosaic(reference, *layout)?;
            Ok((reference.clone(), DegradedInput::Mosaic(m)))
        }
        Degradation::PoissonBlur { photon_max, .. } => {
            let kernel = kernel.expect("kernel built for poisson-blur degradation");
            let gray = if reference.channels() == 1 { reference.clone() } else { reference.to_grayscale() };
            let blurred = gray.convolve(kernel);
            let noisy = noise::add_poisson_noise(&blurred, *photon_max, rng)?;
            Ok((gray, DegradedInput::Image(noisy)))
        }
    }
}

/// Builds the degraded/reference pairs for the given dataset indices. Each
/// image gets its own noise stream seeded `run.seed ^ index`; crops of one
/// image draw from that stream in crop order, and crop positions come from
/// the crop seed, so the pairs are a pure function of the run config.
pub fn make_pairs(run: &TrainingRun, indices: &[usize]) -> Result<Vec<TrainPair>> {
    run.validate()?;
    let kernel = match &run.degradation {
        Degradation::PoissonBlur { kernel, .. } => Some(kernel.build()?),
        _ => None,
    };
    let mut pairs = Vec::new();
    for &idx in indices {
        let path = run
            .dataset
            .get(idx)
            .ok_or_else(|| Error::invalid(format!("dataset index {idx} out of range")))?;
        let reference = io::load_image(path)?;
        pairs_for_image(run, idx, path, &reference, kernel.as_ref(), &mut pairs)?;
    }
    Ok(pairs)
}

fn pairs_for_image(
    run: &TrainingRun,
    idx: usize,
    path: &Path,
    reference: &RasterImage,
    kernel: Option<&BlurKernel>,
    pairs: &mut Vec<TrainPair>,
) -> Result<()> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("img{idx}"));
    let image_seed = run.seed ^ idx as u64;
    let mut noise_rng = NoiseRng::from_seed(image_seed);
    let crops: Vec<(RasterImage, String)> = match &run.crop {
        None => vec![(reference.clone(), stem.clone())],
        Some(c) => {
            if reference.width() < c.side || reference.height() < c.side {
                return Err(Error::invalid(format!(
                    "image {stem} ({}x{}) is smaller than the {}px crop side",
                    reference.width(),
                    reference.height(),
                    c.side
                )));
            }
            let mut crop_rng = NoiseRng::for_image(c.seed, idx as u64);
            (0..c.count)
                .map(|k| {
                    let x0 = (crop_rng.next_f64() * (reference.width() - c.side + 1) as f64) as usize;
                    let y0 = (crop_rng.next_f64() * (reference.height() - c.side + 1) as f64) as usize;
                    reference
                        .crop(x0, y0, c.side, c.side)
                        .map(|img| (img, format!("{stem}#{k}")))
                })
                .collect::<Result<_>>()?
        }
    };
    for (crop, label) in crops {
        let (target, input) = degrade_with(&crop, &run.degradation, kernel, &mut noise_rng)?;
        pairs.push(TrainPair { label, seed: image_seed, reference: target, input });
    }
    Ok(())
}

/// Non-learned machinery resolved from the run config.
#[derive(Debug, Clone)]
enum ProcSettings {
    Anlm(AnlmConfig),
    Blend(Vec<DemosaicerId>),
    Tv(DeblurConfig),
}

fn proc_settings(run: &TrainingRun) -> Result<ProcSettings> {
    match (&run.processor, &run.degradation) {
        (ProcessorKind::Anlm, Degradation::Gaussian { sigma }) => {
            let cfg = AnlmConfig {
                neighbor_count: run.knobs.anlm_neighbors,
                search_radius: run.knobs.anlm_search_radius,
                sigma: *sigma,
                ..AnlmConfig::default()
            };
            Ok(ProcSettings::Anlm(cfg))
        }
        (ProcessorKind::Blend, Degradation::Mosaic { .. }) => {
            Ok(ProcSettings::Blend(run.knobs.demosaicers.clone()))
        }
        (ProcessorKind::Tv, Degradation::PoissonBlur { kernel, photon_max }) => {
            let mut cfg = DeblurConfig::new(kernel.build()?);
            cfg.photon_max = *photon_max;
            cfg.iterations = run.knobs.tv_iterations;
            Ok(ProcSettings::Tv(cfg))
        }
        _ => Err(Error::invalid("degradation mode does not match the processor")),
    }
}

/// One pair plus everything about it that does not depend on the
/// coefficients: raw adaptive features (pre-denoised for the denoiser),
/// the patch-match index, demosaicer outputs.
struct PreparedPair {
    pair: TrainPair,
    features_raw: FeatureMap,
    index: Option<NeighborIndex>,
    outputs: Vec<RasterImage>,
}

fn prepare_pairs(
    run: &TrainingRun,
    indices: &[usize],
    settings: &ProcSettings,
) -> Result<Vec<PreparedPair>> {
    let pairs = make_pairs(run, indices)?;
    pairs
        .into_par_iter()
        .map(|pair| prepare_one(run, settings, pair))
        .collect()
}

fn prepare_one(run: &TrainingRun, settings: &ProcSettings, pair: TrainPair) -> Result<PreparedPair> {
    let features_raw = match (&pair.input, &run.degradation) {
        (DegradedInput::Mosaic(m), _) => features::build_features_mosaic(m, &run.feature_spec)?,
        (DegradedInput::Image(img), Degradation::Gaussian { sigma }) => {
            let raw = features::build_features(img, &run.feature_spec)?;
            features::denoise_feature_map(&raw, img, *sigma)?
        }
        (DegradedInput::Image(img), _) => features::build_features(img, &run.feature_spec)?,
    };
    let (index, outputs) = match (settings, &pair.input) {
        (ProcSettings::Anlm(cfg), DegradedInput::Image(img)) => {
            let half_max = run.bounds[0].max as usize / 2;
            (Some(NeighborIndex::build(img, cfg.search_radius, half_max)), Vec::new())
        }
        (ProcSettings::Blend(ids), DegradedInput::Mosaic(m)) => (None, demosaic::demosaic_all(m, ids)?),
        (ProcSettings::Tv(_), DegradedInput::Image(_)) => (None, Vec::new()),
        _ => return Err(Error::invalid("degradation mode does not match the processor")),
    };
    Ok(PreparedPair { pair, features_raw, index, outputs })
}

fn process_pair(p: &PreparedPair, field: &ParameterField, settings: &ProcSettings) -> Result<RasterImage> {
    match (settings, &p.pair.input) {
        (ProcSettings::Anlm(cfg), DegradedInput::Image(img)) => {
            let index = p.index.as_ref().expect("denoiser pairs carry an index");
            anlm::denoise_with_index(img, field, cfg, index)
        }
        (ProcSettings::Blend(_), DegradedInput::Mosaic(_)) => demosaic::blend(&p.outputs, field),
        (ProcSettings::Tv(cfg), DegradedInput::Image(img)) => Ok(tv::deblur(img, field, cfg)?.image),
        _ => Err(Error::invalid("degradation mode does not match the processor")),
    }
}

/// Per-pair features normalized for one template's frozen statistics.
fn stage_features(p: &PreparedPair, template: &ParamMapperModel) -> Result<FeatureMap> {
    if template.feature_count == 1 {
        let unary = match &p.pair.input {
            DegradedInput::Image(img) => features::build_features(img, &template.feature_spec)?,
            DegradedInput::Mosaic(m) => features::build_features_mosaic(m, &template.feature_spec)?,
        };
        unary.normalized(&template.feature_norm)
    } else {
        if p.features_raw.feature_count() != template.feature_count {
            return Err(Error::shape(format!(
                "pair features carry {} slots, the model expects {}",
                p.features_raw.feature_count(),
                template.feature_count
            )));
        }
        p.features_raw.normalized(&template.feature_norm)
    }
}

/// Training pairs with all coefficient-independent work done once.
pub struct TrainContext {
    run: TrainingRun,
    settings: ProcSettings,
    pairs: Vec<PreparedPair>,
}

impl TrainContext {
    pub fn new(run: &TrainingRun) -> Result<TrainContext> {
        run.validate()?;
        let settings = proc_settings(run)?;
        let pairs = prepare_pairs(run, &run.train_indices, &settings)?;
        Ok(TrainContext { run: run.clone(), settings, pairs })
    }

    pub fn run(&self) -> &TrainingRun {
        &self.run
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    /// The objective closure for one template: unpack coefficients, map
    /// per-pixel parameters, run the processor over every training pair and
    /// average the metric. Any failure or non-finite score poisons that
    /// evaluation with the optimizer's penalty value.
    pub fn objective(&self, template: &ParamMapperModel) -> Result<Objective<'_>> {
        template.validate()?;
        if template.processor != self.run.processor {
            return Err(Error::invalid(format!(
                "template is for processor '{}', the run trains '{}'",
                template.processor, self.run.processor
            )));
        }
        if template.param_count() != self.run.bounds.len() {
            return Err(Error::invalid("template parameter count does not match the run bounds"));
        }
        let features = self
            .pairs
            .iter()
            .map(|p| stage_features(p, template))
            .collect::<Result<Vec<_>>>()?;
        Ok(Objective {
            metric: self.run.metric,
            settings: &self.settings,
            pairs: &self.pairs,
            template: template.clone(),
            features,
        })
    }

    fn raw_feature_maps(&self) -> Vec<&FeatureMap> {
        self.pairs.iter().map(|p| &p.features_raw).collect()
    }
}

/// Mean metric over the training pairs as a function of the packed
/// coefficient vector.
pub struct Objective<'a> {
    metric: MetricId,
    settings: &'a ProcSettings,
    pairs: &'a [PreparedPair],
    template: ParamMapperModel,
    features: Vec<FeatureMap>,
}

impl Objective<'_> {
    pub fn dim(&self) -> usize {
        self.template.packed_len()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self.try_value(x) {
            Ok(v) if v.is_finite() => v,
            _ => simplex::PENALTY_VALUE,
        }
    }

    fn try_value(&self, x: &[f64]) -> Result<f64> {
        let model = self.template.unpack(x)?;
        let scores: Vec<Result<f64>> = self
            .pairs
            .par_iter()
            .zip(self.features.par_iter())
            .map(|(p, feats)| {
                let field = model.map_field(feats)?;
                let out = process_pair(p, &field, self.settings)?;
                metrics::evaluate(self.metric, &out, &p.pair.reference)
            })
            .collect();
        // summed in pair order so the mean is schedule-independent
        let mut sum = 0.0;
        for s in scores {
            let v = s?;
            if !v.is_finite() {
                return Err(Error::invalid("non-finite metric value"));
            }
            sum += v;
        }
        Ok(sum / self.pairs.len() as f64)
    }
}

/// Coefficient response whose mapped value equals the processor's stock
/// default, so optimization starts at the published baseline.
fn start_response(processor: ProcessorKind, k: usize, b: &BoundSpec) -> f64 {
    let target = match (processor, k) {
        (ProcessorKind::Anlm, 0) => DEFAULT_ANLM_PATCH,
        (ProcessorKind::Anlm, 1) => DEFAULT_ANLM_STRENGTH,
        // blend weights and the regularization weight start mid-range
        _ => return 0.0,
    };
    if target > b.min && target < b.max {
        ((target - b.min) / (b.max - target)).ln()
    } else {
        0.0
    }
}

/// The constant-only template plus the packed start vector that reproduces
/// the processor defaults.
pub fn global_template(run: &TrainingRun) -> Result<(ParamMapperModel, Vec<f64>)> {
    let params = run
        .bounds
        .iter()
        .map(|b| ParamSpec {
            name: b.name.clone(),
            p_min: b.min,
            p_max: b.max,
            discrete: if b.odd { Discreteness::OddInteger } else { Discreteness::Continuous },
            block: CoefficientBlock::zeros(1),
        })
        .collect();
    let template = ParamMapperModel {
        format_version: MODEL_FORMAT_VERSION,
        processor: run.processor,
        feature_count: 1,
        feature_spec: FeatureSpec::unary(),
        feature_norm: vec![FeatureStat { mean: 0.0, std: 1.0 }],
        params,
    };
    template.validate()?;
    let mut x0 = Vec::with_capacity(template.packed_len());
    for (k, b) in run.bounds.iter().enumerate() {
        x0.push(start_response(run.processor, k, b));
        x0.push(0.0);
        x0.push(0.0);
    }
    Ok((template, x0))
}

/// The untrained reference point: a constant-only model pinned at the
/// processor's stock defaults.
pub fn baseline_model(run: &TrainingRun) -> Result<ParamMapperModel> {
    let (template, x0) = global_template(run)?;
    template.unpack(&x0)
}

/// One fitted stage: the model, the objective at its start point and the
/// optimizer run. `opt.best_value >= start_value` always holds because the
/// start point is the first vertex the optimizer evaluates.
#[derive(Debug, Clone)]
pub struct StageFit {
    pub model: ParamMapperModel,
    pub start_value: f64,
    pub opt: OptResult,
}

fn fit_stage(ctx: &TrainContext, template: ParamMapperModel, x0: Vec<f64>) -> Result<StageFit> {
    let obj = ctx.objective(&template)?;
    let start_value = obj.value(&x0);
    let opt = simplex::maximize(|x| obj.value(x), &x0, &ctx.run.simplex)?;
    let model = template.unpack(&opt.best_point)?;
    Ok(StageFit { model, start_value, opt })
}

/// Fits the constant-only model, starting at the processor defaults so the
/// result is never worse than the baseline on the training split.
pub fn train_global(ctx: &TrainContext) -> Result<StageFit> {
    let (template, x0) = global_template(ctx.run())?;
    fit_stage(ctx, template, x0)
}

/// Fits the full feature-driven model, warm-started by embedding the global
/// solution so the first evaluation reproduces its training score exactly.
/// Normalization statistics are frozen from the training pairs.
pub fn train_adaptive(ctx: &TrainContext, warm: &ParamMapperModel) -> Result<StageFit> {
    if warm.feature_count != 1 {
        return Err(Error::invalid("the warm start must be a constant-only model"));
    }
    if warm.processor != ctx.run.processor {
        return Err(Error::invalid("the warm start was trained for a different processor"));
    }
    let stats = features::compute_stats(&ctx.raw_feature_maps())?;
    let template = warm.embed_global(ctx.run.feature_spec.clone(), stats)?;
    let x0 = template.pack();
    fit_stage(ctx, template, x0)
}

#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub baseline: ParamMapperModel,
    pub global: ParamMapperModel,
    pub adaptive: Option<ParamMapperModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitId {
    Train,
    Test,
}

impl SplitId {
    pub fn name(self) -> &'static str {
        match self {
            SplitId::Train => "train",
            SplitId::Test => "test",
        }
    }
}

impl std::fmt::Display for SplitId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageId {
    Degraded,
    Baseline,
    Global,
    Adaptive,
}

impl StageId {
    pub fn name(self) -> &'static str {
        match self {
            StageId::Degraded => "degraded",
            StageId::Baseline => "baseline",
            StageId::Global => "global",
            StageId::Adaptive => "adaptive",
        }
    }
}

impl std::fmt::Display for StageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// All three metrics for one image at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub split: SplitId,
    pub image: String,
    pub stage: StageId,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
}

fn row_metric(row: &ReportRow, metric: MetricId) -> f64 {
    match metric {
        MetricId::Psnr => row.psnr,
        MetricId::Ssim => row.ssim,
        MetricId::MsSsim => row.ms_ssim,
    }
}

/// The full metric grid plus run bookkeeping. Wall-clock stays out of the
/// CSV and text renditions so identical runs produce identical files.
#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub processor: ProcessorKind,
    pub trained_metric: MetricId,
    pub rows: Vec<ReportRow>,
    /// Learned global parameter values, (name, mapped value).
    pub global_params: Vec<(String, f64)>,
    pub evaluations_global: usize,
    pub evaluations_adaptive: usize,
    pub wall_clock_seconds: f64,
}

impl TrainingReport {
    /// Arithmetic mean over the per-image rows of one split and stage, in
    /// row order.
    pub fn mean(&self, split: SplitId, stage: StageId, metric: MetricId) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for row in &self.rows {
            if row.split == split && row.stage == stage {
                sum += row_metric(row, metric);
                n += 1;
            }
        }
        if n == 0 {
            None
        } else {
            Some(sum / n as f64)
        }
    }

    fn splits(&self) -> Vec<SplitId> {
        let mut out = Vec::new();
        for s in [SplitId::Train, SplitId::Test] {
            if self.rows.iter().any(|r| r.split == s) {
                out.push(s);
            }
        }
        out
    }

    fn stages(&self) -> Vec<StageId> {
        let mut out = Vec::new();
        for s in [StageId::Degraded, StageId::Baseline, StageId::Global, StageId::Adaptive] {
            if self.rows.iter().any(|r| r.stage == s) {
                out.push(s);
            }
        }
        out
    }

    /// Per-image rows plus one `mean` row per split and stage. Floats are
    /// written with shortest-round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,image,stage,psnr,ssim,ms_ssim\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.split, r.image, r.stage, r.psnr, r.ssim, r.ms_ssim
            );
        }
        for split in self.splits() {
            for stage in self.stages() {
                if let (Some(p), Some(s), Some(m)) = (
                    self.mean(split, stage, MetricId::Psnr),
                    self.mean(split, stage, MetricId::Ssim),
                    self.mean(split, stage, MetricId::MsSsim),
                ) {
                    let _ = writeln!(out, "{split},mean,{stage},{p},{s},{m}");
                }
            }
        }
        out
    }

    /// Aligned table for terminals.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "processor: {}   trained metric: {}", self.processor, self.trained_metric);
        if !self.global_params.is_empty() {
            let joined: Vec<String> =
                self.global_params.iter().map(|(n, v)| format!("{n} = {v:.6}")).collect();
            let _ = writeln!(out, "global parameters: {}", joined.join(", "));
        }
        if self.evaluations_global > 0 || self.evaluations_adaptive > 0 {
            let _ = writeln!(
                out,
                "objective evaluations: {} global, {} adaptive",
                self.evaluations_global, self.evaluations_adaptive
            );
        }
        let img_w = self
            .rows
            .iter()
            .map(|r| r.image.len())
            .chain(std::iter::once(5))
            .max()
            .unwrap();
        for split in self.splits() {
            let _ = writeln!(out, "\n[{split}]");
            let _ = writeln!(
                out,
                "{:<img_w$}  {:<8}  {:>8}  {:>7}  {:>7}",
                "image", "stage", "PSNR", "SSIM", "MS-SSIM"
            );
            for r in self.rows.iter().filter(|r| r.split == split) {
                let _ = writeln!(
                    out,
                    "{:<img_w$}  {:<8}  {:>8.3}  {:>7.4}  {:>7.4}",
                    r.image, r.stage.name(), r.psnr, r.ssim, r.ms_ssim
                );
            }
            for stage in self.stages() {
                if let (Some(p), Some(s), Some(m)) = (
                    self.mean(split, stage, MetricId::Psnr),
                    self.mean(split, stage, MetricId::Ssim),
                    self.mean(split, stage, MetricId::MsSsim),
                ) {
                    let _ = writeln!(
                        out,
                        "{:<img_w$}  {:<8}  {:>8.3}  {:>7.4}  {:>7.4}",
                        "mean", stage.name(), p, s, m
                    );
                }
            }
        }
        out
    }
}

/// The input image a `degraded` row scores: the noisy frame itself, or the
/// first demosaicer's output when the input is a mosaic (a raw mosaic has
/// no directly comparable RGB rendition).
fn degraded_proxy(p: &PreparedPair) -> Result<RasterImage> {
    match &p.pair.input {
        DegradedInput::Image(img) => Ok(img.clone()),
        DegradedInput::Mosaic(_) => p
            .outputs
            .first()
            .cloned()
            .ok_or_else(|| Error::invalid("mosaic pairs need at least one demosaicer")),
    }
}

fn make_row(
    split: SplitId,
    image: &str,
    stage: StageId,
    out: &RasterImage,
    reference: &RasterImage,
) -> Result<ReportRow> {
    Ok(ReportRow {
        split,
        image: image.to_owned(),
        stage,
        psnr: metrics::psnr(out, reference)?,
        ssim: metrics::ssim(out, reference)?,
        ms_ssim: metrics::ms_ssim(out, reference)?,
    })
}

fn mapped_global_values(model: &ParamMapperModel) -> Result<Vec<(String, f64)>> {
    if model.feature_count != 1 {
        return Err(Error::invalid("global parameter values need a constant-only model"));
    }
    Ok(model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.map(p.block.eval(&[1.0]))))
        .collect())
}

/// Scores every model on both splits with all three metrics. Rows appear
/// per pair (degraded, baseline, global, adaptive) in split and pair order,
/// so the means are reproducible sums.
pub fn evaluate(models: &TrainedModels, run: &TrainingRun) -> Result<TrainingReport> {
    run.validate()?;
    for m in [Some(&models.baseline), Some(&models.global), models.adaptive.as_ref()].into_iter().flatten() {
        m.validate()?;
        if m.processor != run.processor {
            return Err(Error::invalid("a model was trained for a different processor"));
        }
        if m.param_count() != run.bounds.len() {
            return Err(Error::invalid("a model's parameter count does not match the run"));
        }
    }
    let settings = proc_settings(run)?;
    let mut rows = Vec::new();
    for (split, indices) in [(SplitId::Train, &run.train_indices), (SplitId::Test, &run.test_indices)] {
        if indices.is_empty() {
            continue;
        }
        let prepared = prepare_pairs(run, indices, &settings)?;
        let mut stages: Vec<(StageId, &ParamMapperModel)> =
            vec![(StageId::Baseline, &models.baseline), (StageId::Global, &models.global)];
        if let Some(a) = &models.adaptive {
            stages.push((StageId::Adaptive, a));
        }
        let per_pair: Vec<Vec<ReportRow>> = prepared
            .par_iter()
            .map(|p| -> Result<Vec<ReportRow>> {
                let mut out = Vec::with_capacity(1 + stages.len());
                let proxy = degraded_proxy(p)?;
                out.push(make_row(split, &p.pair.label, StageId::Degraded, &proxy, &p.pair.reference)?);
                for (stage, model) in &stages {
                    let feats = stage_features(p, model)?;
                    let field = model.map_field(&feats)?;
                    let img = process_pair(p, &field, &settings)?;
                    out.push(make_row(split, &p.pair.label, *stage, &img, &p.pair.reference)?);
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        rows.extend(per_pair.into_iter().flatten());
    }
    Ok(TrainingReport {
        processor: run.processor,
        trained_metric: run.metric,
        rows,
        global_params: mapped_global_values(&models.global)?,
        evaluations_global: 0,
        evaluations_adaptive: 0,
        wall_clock_seconds: 0.0,
    })
}

/// Everything `train` produces: the three models, both stage fits and the
/// metric report.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: TrainedModels,
    pub global: StageFit,
    pub adaptive: Option<StageFit>,
    pub report: TrainingReport,
}

/// The full protocol: prepare pairs once, fit the global model from the
/// processor defaults, optionally fit the adaptive model warm-started from
/// it, then score everything on both splits. On the training split and the
/// trained metric, baseline <= global <= adaptive by construction.
pub fn train(run: &TrainingRun, fit_adaptive: bool) -> Result<TrainOutcome> {
    let started = Instant::now();
    let ctx = TrainContext::new(run)?;
    let global = train_global(&ctx)?;
    let adaptive = if fit_adaptive { Some(train_adaptive(&ctx, &global.model)?) } else { None };
    let models = TrainedModels {
        baseline: baseline_model(run)?,
        global: global.model.clone(),
        adaptive: adaptive.as_ref().map(|s| s.model.clone()),
    };
    let mut report = evaluate(&models, run)?;
    report.evaluations_global = global.opt.evaluations;
    report.evaluations_adaptive = adaptive.as_ref().map(|s| s.opt.evaluations).unwrap_or(0);
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { models, global, adaptive, report })
}
