//! Command-line front end.
//!
//! Every structured output is a JSON document `{ "manifest": ..., "payload":
//! ... }`. The manifest records the command, its resolved parameters, the
//! seed, a timestamp and the SHA-256 of the compact payload serialization, so
//! two runs with the same seed produce byte-identical payloads even though
//! their manifests differ. Flat tables are CSV with a header row.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    preset, synth_scene, DatasetDocument, SceneDataset, DEFAULT_LANDMARKS, DEFAULT_NOISE_SIGMA,
};
use crate::error::{Error, Result};
use crate::eval::{
    compare_reports, evaluate, EvalReport, HistogramBin, ReportComparison, DEFAULT_BINS,
};
use crate::geom::Vec3;
use crate::gradcheck::{
    check_loss_gradients, check_model_gradients, GradCheckReport, DEFAULT_STEP,
};
use crate::loss::LossWeights;
use crate::model::{init_model, train, RegressorModel, TrainConfig, TrainTrace};
use crate::tuning::{default_gamma_grid, grid_search, GridResult, GridSpec};

pub const FORMAT_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub parameters: serde_json::Value,
    pub seed: Option<u64>,
    pub timestamp_unix: u64,
    pub payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document<T> {
    pub manifest: RunManifest,
    pub payload: T,
}

/// Compact serialization of a payload; this is what the manifest hashes.
pub fn payload_bytes<T: Serialize>(payload: &T) -> Vec<u8> {
    serde_json::to_vec(payload).expect("payload serializes")
}

pub fn payload_sha256<T: Serialize>(payload: &T) -> String {
    hex::encode(Sha256::digest(payload_bytes(payload)))
}

impl<T: Serialize> Document<T> {
    pub fn new(
        command: &str,
        parameters: serde_json::Value,
        seed: Option<u64>,
        payload: T,
    ) -> Self {
        let timestamp_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            manifest: RunManifest {
                format_version: FORMAT_VERSION,
                command: command.to_string(),
                parameters,
                seed,
                timestamp_unix,
                payload_sha256: payload_sha256(&payload),
            },
            payload,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_document<T: Serialize>(path: &Path, doc: &Document<T>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_document<T: Serialize + DeserializeOwned>(path: &Path) -> Result<Document<T>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let doc: Document<T> = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if doc.manifest.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            path: path.to_path_buf(),
            found: doc.manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if payload_sha256(&doc.payload) != doc.manifest.payload_sha256 {
        return Err(Error::MalformedFile {
            line: None,
            reason: format!(
                "{}: payload does not match its manifest hash",
                path.display()
            ),
        });
    }
    Ok(doc)
}

pub fn load_dataset(path: &Path) -> Result<SceneDataset> {
    let doc: Document<DatasetDocument> = read_document(path)?;
    SceneDataset::from_document(doc.payload).map_err(|e| match e {
        Error::MalformedFile { line, reason } => Error::MalformedFile {
            line,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Shortest representation that parses back to the same `f64`.
fn exact(v: f64) -> String {
    format!("{v}")
}

/// Three significant digits for human-readable summaries.
pub fn sig3(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let decimals = (2 - v.abs().log10().floor() as i32).max(0) as usize;
    format!("{v:.decimals$}")
}

/// `model.json` -> `model.<suffix>`
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

pub fn write_trace_csv(path: &Path, trace: &TrainTrace) -> Result<()> {
    write_csv(
        path,
        &[
            "iteration",
            "total",
            "position_term",
            "rotation_term",
            "los_term",
        ],
        trace.entries.iter().map(|e| {
            vec![
                e.iteration.to_string(),
                exact(e.total),
                exact(e.position_term),
                exact(e.rotation_term),
                exact(e.los_term),
            ]
        }),
    )
}

pub fn write_histogram_csv(path: &Path, unit: &str, bins: &[HistogramBin]) -> Result<()> {
    let edge = format!("upper_edge_{unit}");
    write_csv(
        path,
        &[edge.as_str(), "cumulative_fraction"],
        bins.iter()
            .map(|b| vec![exact(b.upper_edge), exact(b.cumulative_fraction)]),
    )
}

pub fn write_grid_csv(path: &Path, result: &GridResult) -> Result<()> {
    write_csv(
        path,
        &[
            "gamma",
            "val_median_pos_m",
            "val_median_rot_deg",
            "val_median_los_deg",
            "selected",
        ],
        result.rows.iter().map(|r| {
            vec![
                exact(r.gamma),
                exact(r.val_median_pos_m),
                exact(r.val_median_rot_deg),
                exact(r.val_median_los_deg),
                (r.gamma == result.best_gamma).to_string(),
            ]
        }),
    )
}

#[derive(Debug, Parser)]
#[command(name = "poseloss", version, about = "Pose regression loss laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset.
    Synth(SynthArgs),
    /// Train a regressor with the default or line-of-sight loss.
    Train(TrainArgs),
    /// Evaluate a model on a dataset's test split.
    Eval(EvalArgs),
    /// Compare two evaluation reports (negative deltas favour --b).
    Compare(CompareArgs),
    /// Grid-search gamma on a validation split carved from training data.
    Gridsearch(GridArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Scene size in metres, e.g. 2,0.5,1
    #[arg(long, value_delimiter = ',', required_unless_present = "preset")]
    pub extents: Option<Vec<f64>>,
    /// Take extents and split sizes from a 7Scenes-sized preset (chess, heads, ...)
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_LANDMARKS)]
    pub landmarks: usize,
    #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Default,
    Proposed,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub loss: LossKind,
    /// Line-of-sight weight; required with --loss proposed
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.3,1")]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "150,150,500")]
    pub betas: Vec<f64>,
    #[arg(long, default_value_t = 5000)]
    pub iters: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    /// Model file; the trace goes to the same path with extension `trace.csv`
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Bins for both histograms
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    /// Rotation histogram bins (defaults to --bins)
    #[arg(long)]
    pub bins_rot: Option<usize>,
    /// Report file; histograms go to `pos_hist.csv` / `rot_hist.csv` beside it
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GridArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Candidate gammas (default: {0, 0.1, 0.3, 1, 3} x largest extent)
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.3,1")]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "150,150,500")]
    pub betas: Vec<f64>,
    #[arg(long, default_value_t = 5000)]
    pub iters: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Result file; the per-gamma table goes beside it with extension `csv`
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Parameters sampled for the end-to-end model check (0 skips it)
    #[arg(long, default_value_t = 10)]
    pub model_params: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub model_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckPayload {
    pub loss: GradCheckReport,
    pub model: Option<GradCheckReport>,
}

fn params_json<T: Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).expect("arguments serialize")
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let p = args
        .preset
        .as_deref()
        .map(|name| preset(name).ok_or_else(|| usage(format!("unknown preset {name:?}"))));
    let p = p.transpose()?;
    let extents = match (&args.extents, p) {
        (Some(e), _) if e.len() == 3 => Vec3::from_slice(e),
        (Some(e), _) => return Err(usage(format!("--extents needs 3 values, got {}", e.len()))),
        (None, Some(p)) => p.extents,
        (None, None) => return Err(usage("--extents or --preset is required")),
    };
    let n_train = args
        .n_train
        .or(p.map(|p| p.n_train))
        .ok_or_else(|| usage("--n-train is required"))?;
    let n_test = args
        .n_test
        .or(p.map(|p| p.n_test))
        .ok_or_else(|| usage("--n-test is required"))?;
    let mut ds = synth_scene(
        extents,
        n_train,
        n_test,
        args.landmarks,
        args.noise,
        args.seed,
    )?;
    if let Some(name) = args.name.clone().or(p.map(|p| p.name.to_string())) {
        ds.name = name;
    }
    let doc = Document::new(
        "synth",
        params_json(args),
        Some(args.seed),
        ds.to_document(),
    );
    write_document(&args.out, &doc)?;
    eprintln!(
        "{}: {} train / {} test frames, {} features -> {}",
        ds.name,
        ds.train.len(),
        ds.test.len(),
        ds.feature_dim,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let gamma = match (args.loss, args.gamma) {
        (LossKind::Default, g) => {
            if g.is_some_and(|g| g != 0.0) {
                eprintln!("note: --loss default ignores --gamma");
            }
            0.0
        }
        (LossKind::Proposed, Some(g)) => g,
        (LossKind::Proposed, None) => {
            return Err(usage(
                "--loss proposed needs --gamma; pass one explicitly or pick it with `poseloss gridsearch`",
            ))
        }
    };
    let weights = LossWeights::from_lists(&args.alphas, &args.betas, gamma)?;
    let ds = load_dataset(&args.data)?;
    let cfg = TrainConfig {
        iterations: args.iters,
        batch_size: args.batch,
        learning_rate: args.lr,
        weights,
        seed: args.seed,
        hidden_dim: args.hidden,
        log_every: args.log_every,
    };
    let (model, trace) = train(&ds, &cfg)?;
    let params = serde_json::json!({ "args": params_json(args), "resolved": cfg });
    write_document(
        &args.out,
        &Document::new("train", params, Some(args.seed), model),
    )?;
    let trace_path = sidecar(&args.out, "trace.csv");
    write_trace_csv(&trace_path, &trace)?;
    if let (Some(first), Some(last)) = (trace.entries.first(), trace.entries.last()) {
        eprintln!(
            "loss {} -> {} over {} iterations; model {}, trace {}",
            sig3(first.total),
            sig3(last.total),
            cfg.iterations,
            args.out.display(),
            trace_path.display()
        );
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model: RegressorModel = read_document(&args.model)?.payload;
    let ds = load_dataset(&args.data)?;
    if model.input_dim != ds.feature_dim {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim,
            got: ds.feature_dim,
        });
    }
    let report = evaluate(&model, &ds, args.bins, args.bins_rot.unwrap_or(args.bins))?;
    write_document(
        &args.out,
        &Document::new("eval", params_json(args), None, report.clone()),
    )?;
    write_histogram_csv(
        &sidecar(&args.out, "pos_hist.csv"),
        "m",
        &report.pos_histogram,
    )?;
    write_histogram_csv(
        &sidecar(&args.out, "rot_hist.csv"),
        "deg",
        &report.rot_histogram,
    )?;
    eprintln!(
        "{}: median {} m, {} deg, line-of-sight {} deg over {} frames",
        report.scene,
        sig3(report.median_pos_m),
        sig3(report.median_rot_deg),
        sig3(report.median_los_deg),
        report.n_frames
    );
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let a: EvalReport = read_document(&args.a)?.payload;
    let b: EvalReport = read_document(&args.b)?.payload;
    let cmp: ReportComparison = compare_reports(&a, &b)?;
    write_document(
        &args.out,
        &Document::new("compare", params_json(args), None, cmp.clone()),
    )?;
    let pct = |p: Option<f64>| p.map_or("n/a".to_string(), |p| format!("{p:+.1}%"));
    eprintln!(
        "{}: position {} m ({}), rotation {} deg ({}), line-of-sight {} deg ({})",
        cmp.scene,
        sig3(cmp.position_m.delta),
        pct(cmp.position_m.percent_display),
        sig3(cmp.rotation_deg.delta),
        pct(cmp.rotation_deg.percent_display),
        sig3(cmp.los_deg.delta),
        pct(cmp.los_deg.percent_display),
    );
    Ok(())
}

fn cmd_gridsearch(args: &GridArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let gamma_values = args
        .gammas
        .clone()
        .unwrap_or_else(|| default_gamma_grid(ds.extents));
    let spec = GridSpec {
        gamma_values,
        base_cfg: TrainConfig {
            iterations: args.iters,
            batch_size: args.batch,
            learning_rate: args.lr,
            weights: LossWeights::from_lists(&args.alphas, &args.betas, 0.0)?,
            seed: args.seed,
            hidden_dim: args.hidden,
            ..TrainConfig::default()
        },
        val_fraction: args.val_fraction,
    };
    let result = grid_search(&ds, &spec)?;
    let params = serde_json::json!({ "args": params_json(args), "resolved": spec });
    write_document(
        &args.out,
        &Document::new("gridsearch", params, Some(args.seed), result.clone()),
    )?;
    write_grid_csv(&sidecar(&args.out, "csv"), &result)?;
    for r in &result.rows {
        eprintln!(
            "gamma {}: val median {} m, {} deg, line-of-sight {} deg",
            sig3(r.gamma),
            sig3(r.val_median_pos_m),
            sig3(r.val_median_rot_deg),
            sig3(r.val_median_los_deg)
        );
    }
    eprintln!("best gamma {}", result.best_gamma);
    Ok(())
}

/// Model-level check on a tiny network (H = 8, three heads) and a small
/// synthetic batch.
pub fn model_gradcheck(n_params: usize, seed: u64, tol: f64) -> Result<GradCheckReport> {
    let ds = synth_scene(Vec3::new(2.0, 0.5, 1.0), 16, 4, 6, 0.01, seed)?;
    let model = init_model(ds.feature_dim, 8, 3, seed)?;
    let frames: Vec<_> = ds.train.iter().take(8).collect();
    check_model_gradients(
        &model,
        &frames,
        &LossWeights::posenet(1.0),
        n_params,
        seed,
        DEFAULT_STEP,
        tol,
    )
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let loss = check_loss_gradients(args.n, args.seed, args.tol)?;
    let model = match args.model_params {
        0 => None,
        n => Some(model_gradcheck(n, args.seed, args.model_tol)?),
    };
    let passed = loss.passed() && model.as_ref().is_none_or(GradCheckReport::passed);
    let doc = Document::new(
        "gradcheck",
        params_json(args),
        Some(args.seed),
        GradcheckPayload { loss, model },
    );
    println!(
        "{}",
        serde_json::to_string_pretty(&doc).expect("report serializes")
    );
    eprintln!(
        "gradcheck {}: loss max rel error {}{}",
        if passed { "passed" } else { "FAILED" },
        sig3(doc.payload.loss.max_rel_error),
        doc.payload
            .model
            .as_ref()
            .map(|m| format!(", model max rel error {}", sig3(m.max_rel_error)))
            .unwrap_or_default()
    );
    Ok(passed)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => EXIT_USAGE,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Compare(a) => cmd_compare(a).map(|_| true),
        Command::Gridsearch(a) => cmd_gridsearch(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_NUMERICAL,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
