//! `qsmkit` command line: one subcommand per stage plus `pipeline`.
//!
//! Every subcommand prints one JSON summary line on stdout. Failures print one
//! JSON line `{"error": kind, "code": n, "message": ...}` as the last line on
//! stderr and exit with 1 (usage), 2 (I/O or format) or 3 (numerical).

pub mod config;
pub mod slices;
pub mod stages;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::{json, Value};

use crate::background::SmvConfig;
use crate::error::{Error, Result};
use crate::inversion::{invert_cg, invert_tkd, passband_error, CgConfig, TkdConfig};
use crate::io::{load_raw, save_raw};
use crate::metrics::evaluate;
use crate::neural::{load_checkpoint, predict_volume, save_checkpoint, train, TrainConfig, TrainingPair, UNetConfig};
use crate::phantom::{forward_field, EchoTrain, PhantomSpec};
use crate::preprocess::NormalizedPhase;
use config::PipelineConfig;
use slices::{emit_slices, Axis, DEFAULT_WINDOW};
use stages::*;

#[derive(Debug, Parser)]
#[command(name = "qsmkit", version, about = "Quantitative susceptibility mapping on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rasterize a phantom: chi, brain/head masks and labels.
    Phantom(PhantomArgs),
    /// Full-FOV field shift (ppm) of a susceptibility map, optionally with simulated echoes.
    Forward(ForwardArgs),
    /// Laplacian unwrapping of wrapped phase volumes.
    Unwrap(UnwrapArgs),
    /// Combine unwrapped echoes into the normalized total field (ppm).
    Normalize(NormalizeArgs),
    /// Variable-radius SMV background field removal.
    Bgremove(BgremoveArgs),
    /// Dipole inversion of a local field (TKD or CG-Tikhonov).
    Invert(InvertArgs),
    /// Train the U-net on simulated phantoms or on given volume triples.
    Train(TrainArgs),
    /// Whole-volume U-net prediction from total field.
    Predict(PredictArgs),
    /// RMSE, HFEN, SSIM (and ROI statistics) of a reconstruction, as CSV.
    Evaluate(EvaluateArgs),
    /// Run every stage from a JSON config.
    Pipeline(PipelineArgs),
    /// Render slices as 8-bit PGM images.
    Slices(SlicesArgs),
}

#[derive(Debug, Args)]
struct EchoArgs {
    #[arg(long, default_value_t = 8)]
    echo_count: usize,
    /// First echo time, seconds.
    #[arg(long, default_value_t = 5.468e-3)]
    te1: f64,
    /// Echo spacing, seconds.
    #[arg(long, default_value_t = 3e-3)]
    te_spacing: f64,
    /// Field strength, tesla.
    #[arg(long, default_value_t = 3.0)]
    b0: f64,
}

impl EchoArgs {
    fn train(&self) -> EchoTrain {
        EchoTrain::uniform(self.echo_count, self.te1, self.te_spacing, self.b0)
    }
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON phantom spec (defaults to the reference phantom).
    #[arg(long, conflicts_with = "randomized")]
    spec: Option<PathBuf>,
    /// Randomize the reference geometry with this seed.
    #[arg(long)]
    randomized: Option<u64>,
    /// Cubic grid edge.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Isotropic voxel size, mm.
    #[arg(long, default_value_t = 1.0)]
    voxel: f64,
}

#[derive(Debug, Args)]
struct ForwardArgs {
    #[arg(long)]
    chi: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write wrapped echo phase/magnitude here.
    #[arg(long, requires = "support")]
    echo_dir: Option<PathBuf>,
    /// Signal support mask for the echoes.
    #[arg(long)]
    support: Option<PathBuf>,
    /// Echo SNR; noiseless when absent.
    #[arg(long, requires = "seed")]
    snr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    echoes: EchoArgs,
}

#[derive(Debug, Args)]
struct UnwrapArgs {
    #[arg(long, num_args = 1.., required = true)]
    input: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    output: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct NormalizeArgs {
    /// Unwrapped phases in echo order.
    #[arg(long, num_args = 1.., required = true)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    echoes: EchoArgs,
}

#[derive(Debug, Args)]
struct BgremoveArgs {
    #[arg(long)]
    psi: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the mask of voxels with a valid local field.
    #[arg(long)]
    reliable_out: PathBuf,
    #[arg(long, default_value_t = 1)]
    r_min: usize,
    #[arg(long, default_value_t = 25)]
    r_max: usize,
    #[arg(long, default_value_t = 0.05)]
    truncation: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    Tkd,
    Cg,
}

#[derive(Debug, Args)]
struct InvertArgs {
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long)]
    local: PathBuf,
    /// Required for cg.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    threshold: f64,
    #[arg(long, default_value_t = 1e-2)]
    lambda: f64,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    rtol: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// JSON object with optional "unet" and "train" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training triple `psi,label,mask` (repeatable); simulated phantoms when absent.
    #[arg(long, requires = "val_pair")]
    pair: Vec<String>,
    #[arg(long)]
    val_pair: Vec<String>,
    #[arg(long, default_value_t = 10)]
    subjects: usize,
    #[arg(long, default_value_t = 2)]
    val_subjects: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 1.0)]
    voxel: f64,
    /// SNR of simulated subjects.
    #[arg(long, default_value_t = 50.0, conflicts_with = "noiseless")]
    snr: f64,
    #[arg(long)]
    noiseless: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patches_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Write the loss curves as JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    echoes: EchoArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    psi: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    recon: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value = "recon")]
    method: String,
    #[arg(long)]
    csv: PathBuf,
    #[arg(long, requires = "labels")]
    roi_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct SlicesArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "z")]
    axis: Axis,
    /// Comma-separated slice indices; the centre slice when absent.
    #[arg(long, value_delimiter = ',')]
    indices: Vec<usize>,
    /// Display window `lo,hi` in the volume's units.
    #[arg(long, value_delimiter = ',', num_args = 1, allow_hyphen_values = true)]
    window: Vec<f64>,
    /// File name prefix; the input file stem when absent.
    #[arg(long)]
    stem: Option<String>,
}

/// Exit code of a library error: 1 usage/argument, 2 I/O or format, 3 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_)
        | Error::BadMagic { .. }
        | Error::UnsupportedVersion(_)
        | Error::DimensionOverflow(_)
        | Error::Truncated { .. }
        | Error::UnsupportedDatatype(_)
        | Error::NotThreeD(_)
        | Error::Parse(_) => 2,
        Error::Invalid(_) | Error::DimMismatch(..) | Error::OutOfBounds(_) => 1,
        Error::NonFinite(_)
        | Error::EmptyMask
        | Error::ZeroVariance
        | Error::ZeroNorm(_)
        | Error::Divergence { .. }
        | Error::Numerical(_) => 3,
    }
}

fn error_line(kind: &str, code: i32, message: &str) -> String {
    json!({ "error": kind, "code": code, "message": message }).to_string()
}

/// Parses `argv` (including the program name), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{}", e.render());
                return 0;
            }
            let _ = write!(stderr, "{}", e.render());
            let msg = e.kind().to_string();
            let _ = writeln!(stderr, "{}", error_line("usage", 1, &msg));
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            let _ = writeln!(stdout, "{summary}");
            0
        }
        Err(e) => {
            let code = exit_code(&e);
            let kind = match code {
                1 => "usage",
                2 => "io",
                _ => "numerical",
            };
            let _ = writeln!(stderr, "{}", error_line(kind, code, &e.to_string()));
            code
        }
    }
}

fn dispatch(cmd: Command) -> Result<Value> {
    match cmd {
        Command::Phantom(a) => phantom_cmd(a),
        Command::Forward(a) => forward_cmd(a),
        Command::Unwrap(a) => {
            unwrap_files(&a.input, &a.output)?;
            Ok(json!({ "command": "unwrap", "outputs": a.output }))
        }
        Command::Normalize(a) => {
            let psi = normalize_files(&a.input, &a.echoes.train(), &a.out)?;
            Ok(json!({ "command": "normalize", "out": a.out, "min": psi.min(), "max": psi.max() }))
        }
        Command::Bgremove(a) => {
            let cfg = SmvConfig { r_min: a.r_min, r_max: a.r_max, truncation: a.truncation };
            let (_, reliable) = bgremove_files(&a.psi, &a.mask, &cfg, &a.out, &a.reliable_out)?;
            Ok(json!({ "command": "bgremove", "out": a.out, "reliable_voxels": reliable.count() }))
        }
        Command::Invert(a) => invert_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => {
            let mut model = load_checkpoint(&a.model)?;
            let psi = NormalizedPhase::from_field(load_raw(&a.psi)?);
            save_raw(&predict_volume(&mut model, &psi)?, &a.out)?;
            Ok(json!({ "command": "predict", "out": a.out }))
        }
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Pipeline(a) => pipeline(&PipelineConfig::load(&a.config)?),
        Command::Slices(a) => slices_cmd(a),
    }
}

fn phantom_cmd(a: PhantomArgs) -> Result<Value> {
    let (dims, vs) = ([a.size; 3], [a.voxel; 3]);
    let spec = match (&a.spec, a.randomized) {
        (Some(p), _) => serde_json::from_slice::<PhantomSpec>(&fs::read(p)?)?,
        (None, Some(seed)) => PhantomSpec::randomized(dims, vs, seed),
        (None, None) => PhantomSpec::reference(dims, vs),
    };
    let ph = spec.build()?;
    write_phantom(&ph, &a.out_dir)?;
    fs::write(a.out_dir.join("spec.json"), serde_json::to_vec_pretty(&spec)?)?;
    Ok(json!({
        "command": "phantom",
        "out_dir": a.out_dir,
        "dims": spec.dims,
        "brain_voxels": ph.brain_mask.count(),
    }))
}

fn forward_cmd(a: ForwardArgs) -> Result<Value> {
    let chi = load_raw(&a.chi)?;
    let field = persist(&forward_field(&chi)?, &a.out)?;
    let mut summary = json!({ "command": "forward", "out": a.out });
    if let (Some(dir), Some(support)) = (&a.echo_dir, &a.support) {
        let phases = write_echoes(&field, &load_mask(support)?, &a.echoes.train(), a.snr, a.seed.unwrap_or(0), dir)?;
        summary["echoes"] = json!(phases);
    }
    Ok(summary)
}

fn invert_cmd(a: InvertArgs) -> Result<Value> {
    let local = load_raw(&a.local)?;
    match a.method {
        Method::Tkd => {
            let chi = invert_tkd(&local, &TkdConfig { threshold: a.threshold, ..Default::default() })?;
            save_raw(&chi, &a.out)?;
            Ok(json!({ "command": "invert", "method": "tkd", "out": a.out }))
        }
        Method::Cg => {
            let mask = a.mask.as_ref().ok_or_else(|| Error::Invalid("--mask is required for cg".into()))?;
            let cfg = CgConfig { lambda: a.lambda, max_iters: a.max_iters, rtol: a.rtol };
            let rep = invert_cg(&local, &load_mask(mask)?, &cfg)?;
            save_raw(&rep.chi, &a.out)?;
            Ok(json!({
                "command": "invert", "method": "cg", "out": a.out,
                "iterations": rep.iterations, "converged": rep.converged,
            }))
        }
    }
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    unet: UNetConfig,
    train: TrainConfig,
}

fn load_pair(spec: &str) -> Result<TrainingPair> {
    let parts: Vec<&str> = spec.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Invalid(format!("pair '{spec}' must be psi,label,mask")));
    }
    let psi = NormalizedPhase::from_field(load_raw(parts[0])?);
    TrainingPair::new(&psi, load_raw(parts[1])?, load_mask(Path::new(parts[2]))?)
}

fn train_cmd(a: TrainArgs) -> Result<Value> {
    let mut cfg: TrainFile = match &a.config {
        Some(p) => serde_json::from_slice(&fs::read(p)?)?,
        None => TrainFile::default(),
    };
    cfg.train.epochs = a.epochs.unwrap_or(cfg.train.epochs);
    cfg.train.patches_per_epoch = a.patches_per_epoch.unwrap_or(cfg.train.patches_per_epoch);
    cfg.train.batch_size = a.batch_size.unwrap_or(cfg.train.batch_size);
    let (mut model, report) = if a.pair.is_empty() {
        let data = SyntheticData {
            dims: [a.size; 3],
            voxel_size: [a.voxel; 3],
            echoes: a.echoes.train(),
            snr: (!a.noiseless).then_some(a.snr),
            subjects: a.subjects,
            val_subjects: a.val_subjects,
        };
        train_synthetic(&data, &cfg.unet, &cfg.train, a.seed)?
    } else {
        let tr = a.pair.iter().map(|s| load_pair(s)).collect::<Result<Vec<_>>>()?;
        let va = a.val_pair.iter().map(|s| load_pair(s)).collect::<Result<Vec<_>>>()?;
        train(&tr, &va, &cfg.unet, &TrainConfig { seed: a.seed, ..cfg.train })?
    };
    save_checkpoint(&mut model, &a.out)?;
    if let Some(p) = &a.report {
        fs::write(p, serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(json!({
        "command": "train",
        "out": a.out,
        "best_epoch": report.best_epoch,
        "best_val_loss": report.val_loss[report.best_epoch],
        "zero_val_loss": report.zero_val_loss,
        "initial_val_loss": report.initial_val_loss,
    }))
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<Value> {
    let labels = a.labels.as_ref().map(load_raw).transpose()?;
    let rep = evaluate(&a.method, &load_raw(&a.recon)?, &load_raw(&a.truth)?, &load_mask(&a.mask)?, labels.as_ref())?;
    let reports = [rep];
    fs::write(&a.csv, metrics_csv(&reports))?;
    if let Some(p) = &a.roi_csv {
        fs::write(p, roi_csv(&reports))?;
    }
    let r = &reports[0];
    Ok(json!({
        "command": "evaluate", "method": r.method, "rmse_pct": r.rmse_pct,
        "hfen_pct": r.hfen_pct, "ssim": r.ssim, "csv": a.csv,
    }))
}

fn slices_cmd(a: SlicesArgs) -> Result<Value> {
    let v = load_raw(&a.input)?;
    let window = match a.window.as_slice() {
        [] => DEFAULT_WINDOW,
        [lo, hi] => (*lo, *hi),
        _ => return Err(Error::Invalid("--window takes lo,hi".into())),
    };
    let indices = if a.indices.is_empty() { vec![v.dims().as_array()[a.axis.index()] / 2] } else { a.indices };
    let stem = a.stem.unwrap_or_else(|| a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let paths = emit_slices(&v, a.axis, &indices, window, &a.out_dir, &stem)?;
    Ok(json!({ "command": "slices", "images": paths }))
}

/// Relative passband error below which TKD counts as exact.
pub const PASSBAND_TOLERANCE: f64 = 1e-10;

/// phantom -> forward -> echoes -> unwrap -> normalize -> {tkd, cg, predict} -> evaluate.
pub fn pipeline(cfg: &PipelineConfig) -> Result<Value> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;

    let spec = cfg.phantom.spec()?;
    let ph = spec.build()?;
    write_phantom(&ph, out)?;
    let chi = load_raw(out.join(CHI))?;
    let brain = load_mask(&out.join(BRAIN_MASK))?;
    let labels = load_raw(out.join(LABELS))?;
    info!("phantom {:?}: {} brain voxels", spec.dims, brain.count());

    // The passband check runs on the unrounded field; the file keeps f32 precision.
    let delta = forward_field(&chi)?;
    let passband = passband_error(&invert_tkd(&delta, &cfg.tkd)?, &chi, cfg.tkd.threshold)?;
    let field = persist(&delta, &out.join("field.qsmv"))?;

    let echo_dir = out.join("echoes");
    let phases = write_echoes(&field, &load_mask(&out.join(HEAD_MASK))?, &cfg.echoes, cfg.snr, cfg.seed, &echo_dir)?;
    let unwrapped: Vec<PathBuf> = (0..phases.len()).map(|i| echo_path(&echo_dir, i, "unwrapped")).collect();
    unwrap_files(&phases, &unwrapped)?;
    let psi = normalize_files(&unwrapped, &cfg.echoes, &out.join("psi.qsmv"))?;
    info!("normalized total field in [{:.4}, {:.4}] ppm", psi.min(), psi.max());

    let (local, reliable) =
        bgremove_files(&out.join("psi.qsmv"), &out.join(BRAIN_MASK), &cfg.smv, &out.join("local.qsmv"), &out.join("reliable_mask.qsmv"))?;
    let tkd = persist(&invert_tkd(&local, &cfg.tkd)?, &out.join("tkd.qsmv"))?;
    let cg_report = invert_cg(&local, &brain, &cfg.cg)?;
    let cg = persist(&cg_report.chi, &out.join("cg.qsmv"))?;

    let mut model = match &cfg.train.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => {
            let data = SyntheticData {
                dims: cfg.phantom.dims,
                voxel_size: cfg.phantom.voxel_size,
                echoes: cfg.echoes.clone(),
                snr: cfg.train.snr,
                subjects: cfg.train.subjects,
                val_subjects: cfg.train.val_subjects,
            };
            let (model, report) = train_synthetic(&data, &cfg.unet, &cfg.train.config, cfg.seed)?;
            fs::write(out.join("train_report.json"), serde_json::to_vec_pretty(&report)?)?;
            model
        }
    };
    save_checkpoint(&mut model, out.join("model.qsmn"))?;
    let net = persist(&predict_volume(&mut model, &NormalizedPhase::from_field(psi))?, &out.join("unet.qsmv"))?;

    let reports = [("tkd", &tkd), ("cg", &cg), ("unet", &net)]
        .into_iter()
        .map(|(name, v)| evaluate(name, v, &chi, &reliable, Some(&labels)))
        .collect::<Result<Vec<_>>>()?;
    fs::write(out.join("metrics.csv"), metrics_csv(&reports))?;
    fs::write(out.join("roi.csv"), roi_csv(&reports))?;

    let s = &cfg.slices;
    let indices = if s.indices.is_empty() { vec![chi.dims().as_array()[s.axis.index()] / 2] } else { s.indices.clone() };
    let slice_dir = out.join("slices");
    for (name, v) in [("chi", &chi), ("tkd", &tkd), ("cg", &cg), ("unet", &net)] {
        emit_slices(v, s.axis, &indices, s.window, &slice_dir, name)?;
    }

    let summary = json!({
        "command": "pipeline",
        "out_dir": out,
        "tkd_passband_error": passband,
        "tkd_passband_exact": passband <= PASSBAND_TOLERANCE,
        "cg_iterations": cg_report.iterations,
        "metrics": reports.iter().map(|r| json!({
            "method": r.method, "rmse_pct": r.rmse_pct, "hfen_pct": r.hfen_pct, "ssim": r.ssim,
        })).collect::<Vec<_>>(),
    });
    fs::write(out.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}
