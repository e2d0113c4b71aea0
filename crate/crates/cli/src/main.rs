//! Batch front end: synthesize degraded datasets, train parameter mappers,
//! apply them to images, score them against manifests and export the
//! learned per-pixel parameter maps.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pixtune_core::anlm::{self, AnlmConfig};
use pixtune_core::demosaic::{self, DemosaicerId};
use pixtune_core::error::Error as CoreError;
use pixtune_core::features::{self, FeatureMap};
use pixtune_core::io;
use pixtune_core::metrics::MetricId;
use pixtune_core::model::{ParamMapperModel, ParameterField, ProcessorKind, MODEL_FORMAT_VERSION};
use pixtune_core::noise::NoiseRng;
use pixtune_core::trainer::{
    self, degrade, DegradedInput, Degradation, KernelSpec, ReportRow, SplitId, StageId,
    TrainingReport, TrainingRun,
};
use pixtune_core::tv::{self, DeblurConfig};
use pixtune_core::{BayerMosaic, BlurKernel, CfaLayout, RasterImage};

fn version_string() -> &'static str {
    static VERSION: std::sync::OnceLock<String> = std::sync::OnceLock::new();
    VERSION.get_or_init(|| {
        format!("{} (model format {MODEL_FORMAT_VERSION})", env!("CARGO_PKG_VERSION"))
    })
}

#[derive(Parser)]
#[command(
    name = "pixtune",
    version = version_string(),
    about = "Learned per-pixel parameter tuning for image restoration",
    arg_required_else_help = true
)]
struct Cli {
    /// Cap the worker thread count (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write degraded copies of reference images plus a manifest CSV.
    Synth(SynthArgs),
    /// Fit models from a run config; writes models, a report and traces.
    Train(TrainArgs),
    /// Run a processor over one image with a model or constant parameters.
    Apply(ApplyArgs),
    /// Score a model over a synthesized manifest.
    Eval(EvalArgs),
    /// Export per-parameter maps and a CSV for a model on one image.
    DumpParams(DumpParamsArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum SynthMode {
    Gaussian,
    Mosaic,
    Poisson,
}

#[derive(Args)]
struct SynthArgs {
    /// Degradation protocol.
    #[arg(long, value_enum)]
    mode: SynthMode,
    /// Noise standard deviation on the 8-bit scale (gaussian mode).
    #[arg(long, default_value_t = 20.0)]
    sigma: f64,
    /// CFA layout (mosaic mode): rggb, bggr, grbg or gbrg.
    #[arg(long, default_value = "rggb")]
    cfa: String,
    /// Blur kernel file (poisson mode); default is a 7x7 Gaussian, sigma 2.
    #[arg(long)]
    blur: Option<PathBuf>,
    /// Peak photon count per pixel (poisson mode).
    #[arg(long, default_value_t = 1024.0)]
    photons: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite existing output files.
    /// Overwrite existing output files
    #[arg(long)]
    force: bool,
    /// Reference images followed by the output directory.
    #[arg(required = true, num_args = 2..)]
    paths: Vec<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Where the final model goes (the adaptive one unless --global-only).
    #[arg(long)]
    out: PathBuf,
    /// Also save the intermediate constant-only model here.
    #[arg(long)]
    global_out: Option<PathBuf>,
    /// Objective improvement trace CSV (stage, evaluation, best value).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Per-image metric grid CSV.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Stop after the constant-only stage.
    #[arg(long)]
    global_only: bool,
    /// Overwrite existing output files
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long, value_parser = parse_processor)]
    processor: ProcessorKind,
    /// Trained model file.
    #[arg(long, required_unless_present = "global", conflicts_with = "global")]
    model: Option<PathBuf>,
    /// Constant parameter values (comma separated), bypassing any model.
    #[arg(long, value_delimiter = ',')]
    global: Option<Vec<f64>>,
    /// Noise standard deviation on the 8-bit scale (denoiser).
    #[arg(long, default_value_t = 20.0)]
    sigma: f64,
    /// Blur kernel file (deblurring); default is a 7x7 Gaussian, sigma 2.
    #[arg(long)]
    kernel: Option<PathBuf>,
    /// Peak photon count per pixel (deblurring).
    #[arg(long, default_value_t = 1024.0)]
    photons: f64,
    /// Descent iteration budget (deblurring).
    #[arg(long, default_value_t = tv::DEFAULT_ITERATIONS)]
    iterations: usize,
    /// CFA layout of a mosaic input (blending).
    #[arg(long, default_value = "rggb")]
    cfa: String,
    /// Demosaicers blended in order (blending with --global).
    #[arg(long, value_delimiter = ',')]
    demosaicers: Option<Vec<String>>,
    /// Patch-match neighbor count (denoiser).
    #[arg(long, default_value_t = anlm::DEFAULT_NEIGHBORS)]
    neighbors: usize,
    /// Patch-match search radius (denoiser).
    #[arg(long, default_value_t = anlm::DEFAULT_SEARCH_RADIUS)]
    radius: usize,
    /// Write the normalized blend-weight map here (blending).
    #[arg(long)]
    dump_blend: Option<PathBuf>,
    /// Output bit depth, 8 or 16.
    #[arg(long, default_value_t = 16)]
    bit_depth: u32,
    /// Overwrite existing output files
    #[arg(long)]
    force: bool,
    input: PathBuf,
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Manifest CSV written by synth.
    #[arg(long)]
    manifest: PathBuf,
    /// Also write the per-image grid as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Overwrite existing output files
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DumpParamsArgs {
    #[arg(long)]
    model: PathBuf,
    /// Input image (a grayscale mosaic file for blend models).
    #[arg(long)]
    image: PathBuf,
    /// Output prefix: writes <prefix>_<param>.png, <prefix>_params.csv and,
    /// for blend models, <prefix>_blend.png.
    #[arg(long)]
    out_prefix: String,
    /// Noise standard deviation on the 8-bit scale (denoiser features).
    #[arg(long, default_value_t = 20.0)]
    sigma: f64,
    /// CFA layout of a mosaic input.
    #[arg(long, default_value = "rggb")]
    cfa: String,
    /// Overwrite existing output files
    #[arg(long)]
    force: bool,
}

/// Marker for errors that are the caller's fault; they exit 1 instead of 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

/// Incompatibilities between a model and its input count as usage errors.
fn mismatch_as_usage(e: CoreError) -> anyhow::Error {
    match &e {
        CoreError::InvalidArgument(_) | CoreError::ShapeMismatch(_) | CoreError::ModelFormat(_) => {
            usage(e.to_string())
        }
        _ => anyhow::Error::new(e),
    }
}

fn parse_processor(s: &str) -> std::result::Result<ProcessorKind, String> {
    ProcessorKind::from_str(s).map_err(|e| e.to_string())
}

fn parse_cfa(s: &str) -> Result<CfaLayout> {
    CfaLayout::from_str(s).map_err(|e| usage(e.to_string()))
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 1;
        }
        // ignore "already initialized"; the cap is best-effort
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Apply(args) => cmd_apply(args),
        Command::Eval(args) => cmd_eval(args),
        Command::DumpParams(args) => cmd_dump_params(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

/// Refuses to write over an existing file without --force, and never over
/// one of the inputs.
fn guard_output(path: &Path, inputs: &[&Path], force: bool) -> Result<()> {
    if path.exists() {
        let out = std::fs::canonicalize(path)?;
        for input in inputs {
            if let Ok(inp) = std::fs::canonicalize(input) {
                if inp == out {
                    bail!("output {} would overwrite an input", path.display());
                }
            }
        }
        if !force {
            return Err(usage(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------- synth --

fn blur_spec(blur: &Option<PathBuf>) -> KernelSpec {
    match blur {
        Some(path) => KernelSpec::File { path: path.clone() },
        None => KernelSpec::Gaussian {
            side: trainer::DEFAULT_BLUR_SIDE,
            sigma: trainer::DEFAULT_BLUR_SIGMA,
        },
    }
}

/// Manifest text for one degraded file. param2 may itself be a path, so it
/// is always the last column.
fn manifest_line(input: &Path, reference: &Path, seed: u64, mode: &str, p1: &str, p2: &str) -> String {
    format!("{},{},{seed},{mode},{p1},{p2}\n", input.display(), reference.display())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let (refs, out_dir) = args.paths.split_at(args.paths.len() - 1);
    let out_dir = &out_dir[0];
    if refs.is_empty() {
        return Err(usage("synth needs at least one reference image and an output directory"));
    }
    let degradation = match args.mode {
        SynthMode::Gaussian => {
            if !(args.sigma >= 0.0) {
                return Err(usage("--sigma must be non-negative"));
            }
            Degradation::Gaussian { sigma: args.sigma / 255.0 }
        }
        SynthMode::Mosaic => Degradation::Mosaic { layout: parse_cfa(&args.cfa)? },
        SynthMode::Poisson => {
            Degradation::PoissonBlur { kernel: blur_spec(&args.blur), photon_max: args.photons }
        }
    };
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut manifest = String::from("input_path,reference_path,seed,mode,param1,param2\n");
    for (idx, ref_path) in refs.iter().enumerate() {
        let reference = io::load_image(ref_path)?;
        let seed = args.seed ^ idx as u64;
        let mut rng = NoiseRng::from_seed(seed);
        let (target, input) = degrade(&reference, &degradation, &mut rng)?;
        let stem = ref_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("img{idx}"));
        let inputs: Vec<&Path> = refs.iter().map(|p| p.as_path()).collect();
        match (&degradation, input) {
            (Degradation::Gaussian { .. }, DegradedInput::Image(noisy)) => {
                let out = out_dir.join(format!("{stem}_noisy.png"));
                guard_output(&out, &inputs, args.force)?;
                io::save_image(&out, &noisy, 16)?;
                manifest.push_str(&manifest_line(
                    &out,
                    ref_path,
                    seed,
                    "gaussian",
                    &format!("{}", args.sigma),
                    "",
                ));
            }
            (Degradation::Mosaic { layout }, DegradedInput::Mosaic(m)) => {
                let out = out_dir.join(format!("{stem}_mosaic.png"));
                guard_output(&out, &inputs, args.force)?;
                io::save_mosaic(&out, &m, 16)?;
                let layout_name = layout.to_string().to_ascii_lowercase();
                manifest.push_str(&manifest_line(&out, ref_path, seed, "mosaic", &layout_name, ""));
            }
            (Degradation::PoissonBlur { kernel, photon_max }, DegradedInput::Image(noisy)) => {
                let gray_path = out_dir.join(format!("{stem}_gray.png"));
                let out = out_dir.join(format!("{stem}_poisson.png"));
                guard_output(&gray_path, &inputs, args.force)?;
                guard_output(&out, &inputs, args.force)?;
                io::save_image(&gray_path, &target, 16)?;
                io::save_image(&out, &noisy, 16)?;
                let blur_desc = match kernel {
                    KernelSpec::Gaussian { side, sigma } => format!("gaussian:{side}:{sigma}"),
                    KernelSpec::File { path } => path.display().to_string(),
                };
                manifest.push_str(&manifest_line(
                    &out,
                    &gray_path,
                    seed,
                    "poisson-blur",
                    &format!("{photon_max}"),
                    &blur_desc,
                ));
            }
            _ => unreachable!("degradation and input kinds always agree"),
        }
    }
    let manifest_path = out_dir.join("manifest.csv");
    let inputs: Vec<&Path> = refs.iter().map(|p| p.as_path()).collect();
    guard_output(&manifest_path, &inputs, args.force)?;
    write_text(&manifest_path, &manifest)?;
    println!("wrote {} degraded image(s) and {}", refs.len(), manifest_path.display());
    Ok(())
}

// ---------------------------------------------------------------- train --

fn cmd_train(args: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let run: TrainingRun = serde_json::from_str(&text)
        .map_err(|e| usage(format!("bad run config {}: {e}", args.config.display())))?;
    run.validate().map_err(|e| usage(e.to_string()))?;

    let config_path = args.config.as_path();
    guard_output(&args.out, &[config_path], args.force)?;
    for opt in [&args.global_out, &args.trace, &args.report].into_iter().flatten() {
        guard_output(opt, &[config_path], args.force)?;
    }

    let outcome = trainer::train(&run, !args.global_only)?;
    let final_model = outcome.models.adaptive.as_ref().unwrap_or(&outcome.models.global);
    final_model.save(&args.out)?;
    if let Some(path) = &args.global_out {
        outcome.models.global.save(path)?;
    }
    if let Some(path) = &args.trace {
        let mut text = String::from("stage,evaluation,best_value\n");
        for p in &outcome.global.opt.trace {
            text.push_str(&format!("global,{},{}\n", p.evaluation, p.best_value));
        }
        if let Some(a) = &outcome.adaptive {
            for p in &a.opt.trace {
                text.push_str(&format!("adaptive,{},{}\n", p.evaluation, p.best_value));
            }
        }
        write_text(path, &text)?;
    }
    if let Some(path) = &args.report {
        write_text(path, &outcome.report.to_csv())?;
    }
    print!("{}", outcome.report.render_text());
    println!("\nmodel written to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------- apply --

/// Features for one input under a model's spec, pre-cleaned for denoiser
/// models the same way training does it.
fn features_for(
    model: &ParamMapperModel,
    image: Option<&RasterImage>,
    mosaic: Option<&BayerMosaic>,
    sigma01: f64,
) -> Result<FeatureMap> {
    match (image, mosaic) {
        (Some(img), None) => {
            let raw = features::build_features(img, &model.feature_spec).map_err(mismatch_as_usage)?;
            if model.processor == ProcessorKind::Anlm && model.feature_count > 1 {
                Ok(features::denoise_feature_map(&raw, img, sigma01)?)
            } else {
                Ok(raw)
            }
        }
        (None, Some(m)) => {
            Ok(features::build_features_mosaic(m, &model.feature_spec).map_err(mismatch_as_usage)?)
        }
        _ => unreachable!("exactly one input kind is loaded"),
    }
}

fn load_model_for(processor: ProcessorKind, path: &Path) -> Result<ParamMapperModel> {
    let model = ParamMapperModel::load(path)?;
    if model.processor != processor {
        return Err(usage(format!(
            "model {} was trained for processor '{}', not '{processor}'",
            path.display(),
            model.processor
        )));
    }
    Ok(model)
}

fn constant_field(values: &[f64], expected: usize, w: usize, h: usize) -> Result<ParameterField> {
    if values.len() != expected {
        return Err(usage(format!(
            "--global needs {expected} comma-separated value(s), got {}",
            values.len()
        )));
    }
    Ok(ParameterField::constant(w, h, values))
}

fn cmd_apply(args: ApplyArgs) -> Result<()> {
    if args.bit_depth != 8 && args.bit_depth != 16 {
        return Err(usage("--bit-depth must be 8 or 16"));
    }
    guard_output(&args.output, &[args.input.as_path()], args.force)?;
    let model = match &args.model {
        Some(path) => Some(load_model_for(args.processor, path)?),
        None => None,
    };
    let sigma01 = args.sigma / 255.0;

    let result = match args.processor {
        ProcessorKind::Anlm => {
            let img = io::load_image(&args.input)?;
            let cfg = AnlmConfig {
                neighbor_count: args.neighbors,
                search_radius: args.radius,
                sigma: sigma01,
                ..AnlmConfig::default()
            };
            let field = match (&model, &args.global) {
                (Some(m), _) => {
                    let feats = features_for(m, Some(&img), None, sigma01)?;
                    m.map_field(&feats).map_err(mismatch_as_usage)?
                }
                (None, Some(vals)) => constant_field(vals, 2, img.width(), img.height())?,
                _ => unreachable!("clap enforces one of --model/--global"),
            };
            anlm::denoise(&img, &field, &cfg).map_err(mismatch_as_usage)?
        }
        ProcessorKind::Blend => {
            let layout = parse_cfa(&args.cfa)?;
            let m = io::load_mosaic(&args.input, layout)?;
            let ids = match &args.demosaicers {
                Some(names) => names
                    .iter()
                    .map(|n| DemosaicerId::from_str(n).map_err(|e| usage(e.to_string())))
                    .collect::<Result<Vec<_>>>()?,
                None => match &model {
                    Some(mm) => demosaicers_of(mm)?,
                    None => DemosaicerId::all().to_vec(),
                },
            };
            let outputs = demosaic::demosaic_all(&m, &ids)?;
            let field = match (&model, &args.global) {
                (Some(mm), _) => {
                    let feats = features_for(mm, None, Some(&m), sigma01)?;
                    mm.map_field(&feats).map_err(mismatch_as_usage)?
                }
                (None, Some(vals)) => constant_field(vals, ids.len(), m.width(), m.height())?,
                _ => unreachable!("clap enforces one of --model/--global"),
            };
            if let Some(path) = &args.dump_blend {
                guard_output(path, &[args.input.as_path()], args.force)?;
                let map = demosaic::blend_map_image(&field).map_err(mismatch_as_usage)?;
                io::save_image(path, &map, args.bit_depth)?;
            }
            demosaic::blend(&outputs, &field).map_err(mismatch_as_usage)?
        }
        ProcessorKind::Tv => {
            let loaded = io::load_image(&args.input)?;
            let img = if loaded.channels() == 1 { loaded } else { loaded.to_grayscale() };
            let kernel = match &args.kernel {
                Some(path) => io::load_kernel(path)?,
                None => BlurKernel::gaussian(trainer::DEFAULT_BLUR_SIDE, trainer::DEFAULT_BLUR_SIGMA)?,
            };
            let mut cfg = DeblurConfig::new(kernel);
            cfg.photon_max = args.photons;
            cfg.iterations = args.iterations;
            let field = match (&model, &args.global) {
                (Some(m), _) => {
                    let feats = features_for(m, Some(&img), None, sigma01)?;
                    m.map_field(&feats).map_err(mismatch_as_usage)?
                }
                (None, Some(vals)) => constant_field(vals, 1, img.width(), img.height())?,
                _ => unreachable!("clap enforces one of --model/--global"),
            };
            tv::deblur(&img, &field, &cfg).map_err(mismatch_as_usage)?.image
        }
    };
    io::save_image(&args.output, &result, args.bit_depth)?;
    println!("wrote {}", args.output.display());
    Ok(())
}

/// Recovers the demosaicer list from a blend model's parameter names
/// (w_<demosaicer>).
fn demosaicers_of(model: &ParamMapperModel) -> Result<Vec<DemosaicerId>> {
    model
        .params
        .iter()
        .map(|p| {
            let name = p.name.strip_prefix("w_").unwrap_or(&p.name);
            DemosaicerId::from_str(name).map_err(|_| {
                usage(format!(
                    "cannot infer a demosaicer from parameter {:?}; pass --demosaicers",
                    p.name
                ))
            })
        })
        .collect()
}

// ----------------------------------------------------------------- eval --

struct ManifestRow {
    input: PathBuf,
    reference: PathBuf,
    mode: String,
    param1: String,
    param2: String,
}

fn parse_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(6, ',').collect();
        if fields.len() != 6 {
            return Err(usage(format!("manifest line {} has {} fields, expected 6", i + 1, fields.len())));
        }
        rows.push(ManifestRow {
            input: PathBuf::from(fields[0]),
            reference: PathBuf::from(fields[1]),
            mode: fields[3].to_owned(),
            param1: fields[4].to_owned(),
            param2: fields[5].to_owned(),
        });
    }
    if rows.is_empty() {
        return Err(usage("manifest has no data rows"));
    }
    Ok(rows)
}

fn parse_blur_desc(desc: &str) -> Result<BlurKernel> {
    if let Some(rest) = desc.strip_prefix("gaussian:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 2 {
            return Err(usage(format!("bad blur descriptor '{desc}'")));
        }
        let side: usize = parts[0].parse().map_err(|_| usage(format!("bad blur side in '{desc}'")))?;
        let sigma: f64 = parts[1].parse().map_err(|_| usage(format!("bad blur sigma in '{desc}'")))?;
        Ok(BlurKernel::gaussian(side, sigma)?)
    } else {
        Ok(io::load_kernel(Path::new(desc))?)
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = ParamMapperModel::load(&args.model)?;
    let rows = parse_manifest(&args.manifest)?;
    let stage = if model.feature_count == 1 { StageId::Global } else { StageId::Adaptive };
    let mut report_rows: Vec<ReportRow> = Vec::new();
    for row in &rows {
        let reference = io::load_image(&row.reference)?;
        let label = row
            .input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| row.input.display().to_string());

        let (degraded, processed) = match (model.processor, row.mode.as_str()) {
            (ProcessorKind::Anlm, "gaussian") => {
                let img = io::load_image(&row.input)?;
                let sigma: f64 = row
                    .param1
                    .parse()
                    .map_err(|_| usage(format!("bad sigma '{}' in manifest", row.param1)))?;
                let sigma01 = sigma / 255.0;
                let cfg = AnlmConfig { sigma: sigma01, ..AnlmConfig::default() };
                let feats = features_for(&model, Some(&img), None, sigma01)?;
                let field = model.map_field(&feats).map_err(mismatch_as_usage)?;
                let out = anlm::denoise(&img, &field, &cfg).map_err(mismatch_as_usage)?;
                (img, out)
            }
            (ProcessorKind::Blend, "mosaic") => {
                let layout = parse_cfa(&row.param1)?;
                let m = io::load_mosaic(&row.input, layout)?;
                let ids = demosaicers_of(&model)?;
                let outputs = demosaic::demosaic_all(&m, &ids)?;
                let feats = features_for(&model, None, Some(&m), 0.0)?;
                let field = model.map_field(&feats).map_err(mismatch_as_usage)?;
                let out = demosaic::blend(&outputs, &field).map_err(mismatch_as_usage)?;
                (outputs[0].clone(), out)
            }
            (ProcessorKind::Tv, "poisson-blur") => {
                let img = io::load_image(&row.input)?;
                let photons: f64 = row
                    .param1
                    .parse()
                    .map_err(|_| usage(format!("bad photon count '{}' in manifest", row.param1)))?;
                let mut cfg = DeblurConfig::new(parse_blur_desc(&row.param2)?);
                cfg.photon_max = photons;
                let feats = features_for(&model, Some(&img), None, 0.0)?;
                let field = model.map_field(&feats).map_err(mismatch_as_usage)?;
                let out = tv::deblur(&img, &field, &cfg).map_err(mismatch_as_usage)?.image;
                (img, out)
            }
            (p, mode) => {
                return Err(usage(format!(
                    "manifest mode '{mode}' does not fit a '{p}' model"
                )))
            }
        };
        report_rows.push(metric_row(SplitId::Test, &label, StageId::Degraded, &degraded, &reference)?);
        report_rows.push(metric_row(SplitId::Test, &label, stage, &processed, &reference)?);
    }
    let report = TrainingReport {
        processor: model.processor,
        trained_metric: MetricId::Psnr,
        rows: report_rows,
        global_params: if model.feature_count == 1 {
            model
                .params
                .iter()
                .map(|p| (p.name.clone(), p.map(p.block.eval(&[1.0]))))
                .collect()
        } else {
            Vec::new()
        },
        evaluations_global: 0,
        evaluations_adaptive: 0,
        wall_clock_seconds: 0.0,
    };
    print!("{}", report.render_text());
    if let Some(path) = &args.csv {
        guard_output(path, &[args.manifest.as_path()], args.force)?;
        write_text(path, &report.to_csv())?;
    }
    Ok(())
}

fn metric_row(
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
        psnr: pixtune_core::metrics::psnr(out, reference)?,
        ssim: pixtune_core::metrics::ssim(out, reference)?,
        ms_ssim: pixtune_core::metrics::ms_ssim(out, reference)?,
    })
}

// ---------------------------------------------------------- dump-params --

fn cmd_dump_params(args: DumpParamsArgs) -> Result<()> {
    let model = ParamMapperModel::load(&args.model)?;
    let sigma01 = args.sigma / 255.0;
    let field = if model.processor == ProcessorKind::Blend {
        let layout = parse_cfa(&args.cfa)?;
        let m = io::load_mosaic(&args.image, layout)?;
        let feats = features_for(&model, None, Some(&m), sigma01)?;
        model.map_field(&feats).map_err(mismatch_as_usage)?
    } else {
        let img = io::load_image(&args.image)?;
        let feats = features_for(&model, Some(&img), None, sigma01)?;
        model.map_field(&feats).map_err(mismatch_as_usage)?
    };

    let inputs = [args.image.as_path(), args.model.as_path()];
    let (w, h) = (field.width(), field.height());
    for (k, p) in model.params.iter().enumerate() {
        let span = p.p_max - p.p_min;
        let scaled: Vec<f64> = field.plane(k).iter().map(|v| ((v - p.p_min) / span).clamp(0.0, 1.0)).collect();
        let map = RasterImage::from_samples(w, h, 1, scaled)?;
        let path = PathBuf::from(format!("{}_{}.png", args.out_prefix, p.name));
        guard_output(&path, &inputs, args.force)?;
        io::save_image(&path, &map, 16)?;
    }

    let mut csv = String::from("x,y");
    for p in &model.params {
        csv.push(',');
        csv.push_str(&p.name);
    }
    csv.push('\n');
    for y in 0..h {
        for x in 0..w {
            csv.push_str(&format!("{x},{y}"));
            for k in 0..model.param_count() {
                csv.push_str(&format!(",{}", field.get(x, y, k)));
            }
            csv.push('\n');
        }
    }
    let csv_path = PathBuf::from(format!("{}_params.csv", args.out_prefix));
    guard_output(&csv_path, &inputs, args.force)?;
    write_text(&csv_path, &csv)?;

    if model.processor == ProcessorKind::Blend {
        let map = demosaic::blend_map_image(&field).map_err(mismatch_as_usage)?;
        let path = PathBuf::from(format!("{}_blend.png", args.out_prefix));
        guard_output(&path, &inputs, args.force)?;
        io::save_image(&path, &map, 16)?;
    }
    println!("wrote {} parameter map(s) and {}", model.param_count(), csv_path.display());
    Ok(())
}
