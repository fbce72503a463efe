//! The `bsvae` command line: train, rd-sweep, check-equivalence, sample,
//! reconstruct, eval.
//!
//! Every command writes its outputs plus a `manifest.json` (resolved
//! config, seed, SHA-256 of each artifact) into `--out-dir`. Usage errors,
//! missing files and invalid configs exit with code 2; a failed check or a
//! diverged run exits with code 1.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::analysis::{
    self, rd_sweep_with_progress, write_rd_csv, Family, SweepOutcome, SweepSettings, DESK_BETA_GRID,
    FULL_BETA_GRID,
};
use crate::autodiff::Tensor;
use crate::data::{self, Dataset, Split};
use crate::model::{Architecture, VaeModel};
use crate::objectives::{
    check_equivalence, evaluate_elbo, sample_noise, Interpretation, Mode, ObjectiveConfig,
    DEFAULT_EVAL_MC_SAMPLES, DEFAULT_TRAIN_MC_SAMPLES,
};
use crate::rng::{self, Stream};
use crate::training::{train_with_progress, TrainConfig, TrainStatus};

const MNIST_TRAIN: &str = "train-images-idx3-ubyte";
const MNIST_TEST: &str = "t10k-images-idx3-ubyte";
const EQUIVALENCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "bsvae", version, about = "Gaussian VAE laboratory: β versus decoder variance")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write its checkpoint and loss trace.
    Train(Common),
    /// Train a model per β and write rate/distortion points.
    RdSweep(SweepArgs),
    /// Verify gradient proportionality between β-VAE and a rescaled-variance VAE.
    CheckEquivalence(EquivalenceArgs),
    /// Decode prior samples into an image grid.
    Sample(ImageArgs),
    /// Encode and decode dataset samples into a paired image grid.
    Reconstruct(ImageArgs),
    /// Report test ELBO under each decoder-variance reading.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Const,
    Optimal,
    Bsvae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetArg {
    Mnist,
    Blobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpretationArg {
    Half,
    Betahalf,
    Optimal,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyArg {
    Const,
    Bsvae,
    Both,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Directory holding the MNIST IDX image files.
    #[arg(long, default_value = "data/mnist")]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "mnist")]
    pub dataset: DatasetArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated β values (default 1; rd-sweep defaults to its grid).
    #[arg(long, value_delimiter = ',')]
    pub beta: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "bsvae")]
    pub mode: ModeArg,
    /// Decoder variance C of the constant-σ² objective.
    #[arg(long, default_value_t = 0.5)]
    pub const_c: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 16)]
    pub latent_dim: usize,
    /// Comma-separated hidden widths; the decoder mirrors them.
    #[arg(long, value_delimiter = ',', default_value = "256,128")]
    pub hidden: Vec<usize>,
    /// Monte-Carlo draws per sample (training default 1, evaluation 16).
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// Use only the first N training images (MNIST) or generate N samples (blobs).
    #[arg(long)]
    pub subset_n: Option<usize>,
    /// Use only the first N test images.
    #[arg(long)]
    pub test_n: Option<usize>,
    #[arg(long, value_enum, default_value = "all")]
    pub interpretations: InterpretationArg,
    #[arg(long, default_value_t = 32)]
    pub blob_dim: usize,
    #[arg(long, default_value_t = 5)]
    pub blob_modes: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Held-out fraction for synthetic data.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Record wall-clock milliseconds in trace.csv (otherwise written as 0).
    #[arg(long)]
    pub wall_clock: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value = "both")]
    pub family: FamilyArg,
    /// Use the wide β grid 1e-4..1e3 instead of 0.01..100 (ignored with --beta).
    #[arg(long)]
    pub full_grid: bool,
    /// Also write one checkpoint per trained model.
    #[arg(long)]
    pub save_checkpoints: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EquivalenceArgs {
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, value_delimiter = ',', default_value = "0.1,1,10")]
    pub beta: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub const_c: f64,
    #[arg(long, default_value_t = 16)]
    pub data_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub latent_dim: usize,
    #[arg(long, value_delimiter = ',', default_value = "8")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ImageArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of images in the grid.
    #[arg(long, default_value_t = 16)]
    pub n: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Failed(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => m,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return 2;
        }
    };
    let result = match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::RdSweep(a) => cmd_rd_sweep(&a),
        Command::CheckEquivalence(a) => cmd_check_equivalence(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Reconstruct(a) => cmd_reconstruct(&a),
        Command::Eval(a) => cmd_eval(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message().replace('\n', " "));
            e.code()
        }
    }
}

fn objective_from(c: &Common, beta: f64, mc: usize) -> ObjectiveConfig {
    let mode = match c.mode {
        ModeArg::Const => Mode::ConstantSigma { c: c.const_c },
        ModeArg::Optimal => Mode::OptimalSigma,
        ModeArg::Bsvae => Mode::BsVae,
    };
    ObjectiveConfig {
        mode,
        beta,
        mc_samples: mc,
        stop_sigma_grad: false,
    }
}

fn train_config(c: &Common, objective: ObjectiveConfig) -> CliResult<TrainConfig> {
    let cfg = TrainConfig {
        epochs: c.epochs,
        batch_size: c.batch_size,
        learning_rate: c.lr,
        weight_decay: c.weight_decay,
        seed: c.seed,
        ..TrainConfig::new(objective)
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn single_beta(c: &Common) -> CliResult<f64> {
    match c.beta.as_deref().unwrap_or(&[1.0]) {
        [b] => Ok(*b),
        other => Err(usage(format!("expected exactly one --beta value, got {other:?}"))),
    }
}

/// `(train, test)` for the selected dataset.
fn load_data(c: &Common) -> CliResult<(Dataset, Dataset)> {
    match c.dataset {
        DatasetArg::Mnist => {
            let load = |name: &str, limit| {
                let path = c.data_dir.join(name);
                if !path.exists() {
                    return Err(usage(format!("missing MNIST file {}", path.display())));
                }
                data::load_idx(&path, limit).map_err(usage)
            };
            let train = load(MNIST_TRAIN, c.subset_n)?.with_split(Split::Train);
            let test = load(MNIST_TEST, c.test_n)?.with_split(Split::Test);
            Ok((train, test))
        }
        DatasetArg::Blobs => {
            let n = c.subset_n.unwrap_or(2000);
            let all = data::synthetic_blobs(n, c.blob_dim, c.blob_modes, c.data_seed).map_err(usage)?;
            let (train, test) = data::split_and_shuffle(&all, c.test_fraction, c.data_seed).map_err(usage)?;
            let test = match c.test_n {
                Some(k) => test.take(k),
                None => test,
            };
            Ok((train, test))
        }
    }
}

fn architecture(c: &Common, data_dim: usize) -> CliResult<Architecture> {
    Architecture::new(data_dim, c.hidden.clone(), c.latent_dim).map_err(usage)
}

fn out_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| usage(format!("cannot create {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Failed(format!("cannot write {}: {e}", path.display())))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_manifest(dir: &Path, command: &str, config: serde_json::Value, seed: u64, artifacts: &[PathBuf]) -> CliResult<()> {
    let mut sums = serde_json::Map::new();
    for a in artifacts {
        let bytes = fs::read(a).map_err(|e| CliError::Failed(format!("cannot read {}: {e}", a.display())))?;
        let name = a.strip_prefix(dir).unwrap_or(a).display().to_string();
        sums.insert(name, json!(sha256_hex(&bytes)));
    }
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
        "artifacts": sums,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), text.as_bytes())
}

fn data_summary(train: &Dataset, test: &Dataset) -> serde_json::Value {
    json!({
        "train": { "source": train.source(), "n": train.len(), "dim": train.dim() },
        "test": { "source": test.source(), "n": test.len(), "dim": test.dim() },
    })
}

fn cmd_train(c: &Common) -> CliResult<()> {
    let beta = single_beta(c)?;
    let objective = objective_from(c, beta, c.mc_samples.unwrap_or(DEFAULT_TRAIN_MC_SAMPLES));
    let cfg = train_config(c, objective)?;
    let (train, test) = load_data(c)?;
    let arch = architecture(c, train.dim())?;
    out_dir(&c.out_dir)?;

    let model = VaeModel::init(c.seed, arch.clone()).map_err(usage)?;
    let started = Instant::now();
    let outcome = train_with_progress(model, &train, &cfg, |r| {
        eprintln!(
            "epoch {:>3}  loss {:>14.6}  rate {:>10.4}  distortion {:>14.6}",
            r.epoch, r.loss, r.rate, r.distortion
        );
    })
    .map_err(usage)?;
    let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;

    let ckpt = c.out_dir.join("checkpoint.bsv");
    let trace = c.out_dir.join("trace.csv");
    write_file(&ckpt, &outcome.model.to_checkpoint_bytes())?;
    let mut buf = Vec::new();
    outcome.trace.write_csv(&mut buf, c.wall_clock).map_err(|e| CliError::Failed(e.to_string()))?;
    write_file(&trace, &buf)?;
    let mut config = json!({
        "flags": c,
        "train": cfg,
        "architecture": arch,
        "data": data_summary(&train, &test),
        "status": outcome.status,
    });
    if c.wall_clock {
        config["elapsed_ms"] = json!(elapsed_ms);
    }
    write_manifest(&c.out_dir, "train", config, c.seed, &[ckpt, trace])?;
    match outcome.status {
        TrainStatus::Completed => {
            println!("trained {} epochs; outputs in {}", cfg.epochs, c.out_dir.display());
            Ok(())
        }
        TrainStatus::Diverged { epoch, step, reason } => Err(CliError::Failed(format!(
            "training diverged at epoch {epoch}, step {step}: {reason}"
        ))),
    }
}

fn cmd_rd_sweep(a: &SweepArgs) -> CliResult<()> {
    let c = &a.common;
    let grid: Vec<f64> = match &c.beta {
        Some(b) => b.clone(),
        None if a.full_grid => FULL_BETA_GRID.to_vec(),
        None => DESK_BETA_GRID.to_vec(),
    };
    let (train, test) = load_data(c)?;
    let arch = architecture(c, train.dim())?;
    let objective = ObjectiveConfig::bs_vae(1.0).with_mc_samples(c.mc_samples.unwrap_or(DEFAULT_TRAIN_MC_SAMPLES));
    let settings = SweepSettings {
        arch: arch.clone(),
        train: train_config(c, objective)?,
        eval_mc_samples: DEFAULT_EVAL_MC_SAMPLES,
    };
    let families: Vec<Family> = match a.family {
        FamilyArg::Const => vec![Family::ConstantSigma { c: c.const_c }],
        FamilyArg::Bsvae => vec![Family::BsVae],
        FamilyArg::Both => vec![Family::ConstantSigma { c: c.const_c }, Family::BsVae],
    };
    out_dir(&c.out_dir)?;
    let mut outcome = SweepOutcome::default();
    for family in families {
        let part = rd_sweep_with_progress(&train, &test, &grid, family, &settings, |m| {
            eprintln!("{:?} beta={} status={:?}", m.family, m.beta, m.status);
        })
        .map_err(usage)?;
        outcome.merge(part);
    }
    let csv_path = c.out_dir.join("rd_sweep.csv");
    let mut buf = Vec::new();
    write_rd_csv(&mut buf, &outcome.points).map_err(|e| CliError::Failed(e.to_string()))?;
    write_file(&csv_path, &buf)?;
    let mut artifacts = vec![csv_path];
    if a.save_checkpoints {
        let dir = c.out_dir.join("checkpoints");
        out_dir(&dir)?;
        for m in &outcome.models {
            let fam = match m.family {
                Family::ConstantSigma { .. } => "const",
                Family::BsVae => "bsvae",
            };
            let p = dir.join(format!("{fam}_beta{}.bsv", m.beta));
            write_file(&p, &m.model.to_checkpoint_bytes())?;
            artifacts.push(p);
        }
    }
    let statuses: Vec<_> = outcome
        .models
        .iter()
        .map(|m| json!({ "family": m.family, "beta": m.beta, "seed": m.seed, "status": m.status }))
        .collect();
    let config = json!({
        "flags": a,
        "beta_grid": grid,
        "settings": settings,
        "data": data_summary(&train, &test),
        "runs": statuses,
    });
    write_manifest(&c.out_dir, "rd-sweep", config, c.seed, &artifacts)?;
    println!("{} points written to {}", outcome.points.len(), c.out_dir.join("rd_sweep.csv").display());
    Ok(())
}

fn cmd_check_equivalence(a: &EquivalenceArgs) -> CliResult<()> {
    if a.seeds == 0 || a.beta.is_empty() || a.mc_samples == 0 || a.batch_size == 0 {
        return Err(usage("--seeds, --beta, --mc-samples and --batch-size must be non-empty/positive"));
    }
    if a.beta.iter().any(|&b| !(b > 0.0)) || !(a.const_c > 0.0) {
        return Err(usage("beta and C must be positive"));
    }
    let arch = Architecture::new(a.data_dim, a.hidden.clone(), a.latent_dim).map_err(usage)?;
    let mut worst: f64 = 0.0;
    let mut rows = Vec::new();
    for s in 0..a.seeds {
        let seed = rng::derive_seed(a.seed, s);
        let model = VaeModel::init(seed, arch.clone()).map_err(usage)?;
        let mut rng = rng::stream(seed, Stream::Data);
        let x: Vec<f64> = (0..a.batch_size * a.data_dim).map(|_| rng.random::<f64>()).collect();
        let x = Tensor::matrix(a.batch_size, a.data_dim, x).expect("shape");
        let eps = sample_noise(&mut rng::stream(seed, Stream::Noise), a.batch_size, a.mc_samples, a.latent_dim);
        for &beta in &a.beta {
            let d = check_equivalence(&model, &x, beta, a.const_c, &eps).map_err(|e| CliError::Failed(e.to_string()))?;
            worst = worst.max(d);
            rows.push(json!({ "seed": seed, "beta": beta, "discrepancy": d }));
        }
    }
    let pass = worst <= EQUIVALENCE_TOLERANCE;
    println!("max relative gradient discrepancy: {worst:.3e}");
    println!("{}", if pass { "PASS" } else { "FAIL" });
    out_dir(&a.out_dir)?;
    let report = a.out_dir.join("equivalence.json");
    let body = json!({ "max_discrepancy": worst, "tolerance": EQUIVALENCE_TOLERANCE, "pass": pass, "runs": rows });
    write_file(&report, serde_json::to_string_pretty(&body).expect("json").as_bytes())?;
    write_manifest(&a.out_dir, "check-equivalence", json!({ "flags": a }), a.seed, &[report])?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Failed(format!("discrepancy {worst:.3e} exceeds {EQUIVALENCE_TOLERANCE:e}")))
    }
}

fn load_checkpoint(path: &Path) -> CliResult<VaeModel> {
    if !path.exists() {
        return Err(usage(format!("missing checkpoint {}", path.display())));
    }
    VaeModel::load(path).map_err(usage)
}

fn cmd_sample(a: &ImageArgs) -> CliResult<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    if a.n == 0 {
        return Err(usage("--n must be positive"));
    }
    out_dir(&a.common.out_dir)?;
    let img = analysis::sample_prior(&model, a.n, a.common.seed).map_err(usage)?;
    let path = a.common.out_dir.join("samples.pgm");
    write_file(&path, &img.to_pgm())?;
    write_manifest(&a.common.out_dir, "sample", json!({ "flags": a }), a.common.seed, &[path.clone()])?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_reconstruct(a: &ImageArgs) -> CliResult<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let (_, test) = load_data(&a.common)?;
    if test.dim() != model.architecture().data_dim {
        return Err(usage("checkpoint and dataset dimensions differ"));
    }
    out_dir(&a.common.out_dir)?;
    let img = analysis::reconstruct_grid(&model, &test, a.n, a.common.seed).map_err(usage)?;
    let path = a.common.out_dir.join("reconstructions.pgm");
    write_file(&path, &img.to_pgm())?;
    write_manifest(&a.common.out_dir, "reconstruct", json!({ "flags": a }), a.common.seed, &[path.clone()])?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let c = &a.common;
    let beta = single_beta(c)?;
    if !(beta > 0.0) {
        return Err(usage("beta must be positive"));
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let (_, test) = load_data(c)?;
    if test.dim() != model.architecture().data_dim {
        return Err(usage("checkpoint and dataset dimensions differ"));
    }
    let mc = c.mc_samples.unwrap_or(DEFAULT_EVAL_MC_SAMPLES);
    let report = evaluate_elbo(&model, &test, beta, mc, c.seed).map_err(usage)?;
    let wanted: Vec<Interpretation> = match c.interpretations {
        InterpretationArg::Half => vec![Interpretation::ConstHalf],
        InterpretationArg::Betahalf => vec![Interpretation::ConstBetaHalf],
        InterpretationArg::Optimal => vec![Interpretation::Optimal],
        InterpretationArg::All => Interpretation::CONSTANT_FAMILY.to_vec(),
    };
    let estimates: Vec<_> = wanted.iter().filter_map(|&i| report.get(i).copied()).collect();
    println!("interpretation,rate,distortion,elbo,mc_samples");
    for e in &estimates {
        println!(
            "{},{},{},{},{}",
            e.interpretation.label(),
            crate::format::fmt_f64(e.rate),
            crate::format::fmt_f64(e.distortion),
            crate::format::fmt_f64(e.elbo),
            mc
        );
    }
    out_dir(&c.out_dir)?;
    let path = c.out_dir.join("eval.json");
    let body = json!({ "beta": beta, "mc_samples": mc, "samples": report.samples, "estimates": estimates });
    write_file(&path, serde_json::to_string_pretty(&body).expect("json").as_bytes())?;
    write_manifest(&c.out_dir, "eval", json!({ "flags": a }), c.seed, &[path])?;
    Ok(())
}
