//! `medm` command-line driver.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 computational failure.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use medm::data::{self, DataError, DomainPairDataset, GeneratorSpec};
use medm::evalreport::{self, EvalError, ReportEntry};
use medm::losses::LossError;
use medm::network::{Checkpoint, NetworkError};
use medm::selection::{RunStore, SelectionError, Sweep, SweepResult};
use medm::trainer::{self, HyperConfig, TrainError};

use config::ExperimentConfig;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn compute(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Autodiff(_) => Self::compute(e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Loss(_) | TrainError::Data(_) | TrainError::Io(_) => {
                Self::usage(e.to_string())
            }
            TrainError::Network(n) => n.into(),
            _ => Self::compute(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Network(n) => n.into(),
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<SelectionError> for CliError {
    fn from(e: SelectionError) -> Self {
        match e {
            SelectionError::Train(t) => t.into(),
            SelectionError::Eval(t) => t.into(),
            SelectionError::Network(t) => t.into(),
            SelectionError::Grid(_) | SelectionError::EmptyValidation | SelectionError::Io { .. } => {
                Self::usage(e.to_string())
            }
            _ => Self::compute(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "medm", version, about = "Entropy minimization with diversity maximization for domain adaptation")]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parallel training runs during the diversity-weight sweep.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Reuse completed runs found in the output directory.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic domain pair and write it as CSV plus truth sidecar.
    Gen {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Train one model.
    Train {
        #[arg(long, allow_negative_numbers = true)]
        lambda: f64,
        #[arg(long, allow_negative_numbers = true)]
        beta: f64,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run the two-phase search and write a manifest.
    Sweep,
    /// Evaluate checkpoints against the target truth.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Write report tables for checkpoints and/or a sweep manifest.
    Report {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
    workers: usize,
    resume: bool,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self, CliError> {
        let mut cfg = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.apply_seed(s);
        }
        let workers = cli.workers.or(cfg.workers).unwrap_or(1);
        if workers == 0 {
            return Err(CliError::usage("--workers must be at least 1"));
        }
        let out = cli
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self {
            cfg,
            out,
            workers,
            resume: cli.resume,
        })
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        fs::create_dir_all(&self.out)
            .map_err(|e| CliError::usage(format!("cannot create {}: {e}", self.out.display())))?;
        Ok(&self.out)
    }
}

fn cmd_gen(cli: &Cli, spec_path: &Path) -> Result<(), CliError> {
    let mut spec: GeneratorSpec = config::read_toml(spec_path)?;
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    let ds = data::generate(&spec)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).map_err(|e| CliError::usage(format!("cannot create {}: {e}", out.display())))?;
    let stem = spec_path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    let path = out.join(format!("{stem}.csv"));
    data::save_csv(&ds, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_train(ctx: &Context, lambda: f64, beta: f64, epochs: Option<usize>) -> Result<(), CliError> {
    let hyper = HyperConfig {
        lambda,
        beta,
        epochs: epochs.unwrap_or(ctx.cfg.hyper.epochs),
        ..ctx.cfg.hyper.clone()
    };
    hyper.validate()?;
    let ds = ctx.cfg.dataset()?;
    let net = ctx.cfg.network_for(&ds);
    let model = trainer::train_model(&hyper, &ds, &net)?;
    let out = ctx.out_dir()?;
    let ckpt = out.join("checkpoint.json");
    Checkpoint {
        params: model.params.clone(),
        meta: Some(serde_json::json!({
            "config": hyper,
            "final_target_entropy": model.final_target_entropy,
            "dataset_fingerprint": ds.fingerprint(),
        })),
    }
    .save(&ckpt)?;
    model.write_log(&out.join("log.jsonl"))?;
    log::info!("trained in {:.2}s", model.wall_time.as_secs_f64());
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": ckpt,
            "final_target_entropy": model.final_target_entropy,
        })
    );
    Ok(())
}

fn cmd_sweep(ctx: &Context) -> Result<(), CliError> {
    ctx.cfg.hyper.validate()?;
    let ds = ctx.cfg.dataset()?;
    let net = ctx.cfg.network_for(&ds);
    let out = ctx.out_dir()?;
    let mut sweep = Sweep::new(&ds, ctx.cfg.grid.clone(), net, ctx.cfg.hyper.clone());
    sweep.workers = ctx.workers;
    sweep.store = Some(RunStore::new(out));
    sweep.resume = ctx.resume;
    let (result, _) = sweep.run()?;
    if result.lambda_fallback {
        log::warn!("no lambda met the entropy threshold; manifest is flagged");
    }
    let path = out.join("manifest.json");
    result.write_manifest(&path)?;
    println!(
        "{}",
        serde_json::json!({
            "manifest": path,
            "lambda_star": result.lambda_star,
            "selected_beta": result.selected_beta,
            "selected_checkpoint": result.selected_checkpoint,
        })
    );
    Ok(())
}

fn label_for(path: &Path, meta: Option<&serde_json::Value>) -> String {
    if let Some(cfg) = meta.and_then(|m| m.get("config")) {
        if let (Some(l), Some(b)) = (cfg.get("lambda"), cfg.get("beta")) {
            return format!("lambda={l} beta={b}");
        }
    }
    let name = if path.file_name().is_some_and(|n| n == "checkpoint.json") {
        path.parent().and_then(Path::file_name)
    } else {
        path.file_stem()
    };
    name.map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn entry_for(path: &Path, ds: &DomainPairDataset, label: Option<String>) -> Result<ReportEntry, CliError> {
    let ckpt = Checkpoint::load(path).map_err(|e| CliError::from(e).prefixed(path))?;
    let cfg = ckpt.params.config();
    if cfg.input_dim != ds.feature_dim() {
        return Err(CliError::usage(format!(
            "{}: checkpoint tensor `f.w1` expects {} input features, dataset has {}",
            path.display(),
            cfg.input_dim,
            ds.feature_dim()
        )));
    }
    if cfg.num_classes != ds.num_classes() {
        return Err(CliError::usage(format!(
            "{}: checkpoint tensor `c.w` expects {} classes, dataset has {}",
            path.display(),
            cfg.num_classes,
            ds.num_classes()
        )));
    }
    let report = evalreport::evaluate(&ckpt.params, ds)?;
    let meta = ckpt.meta.as_ref();
    Ok(ReportEntry {
        label: label.unwrap_or_else(|| label_for(path, meta)),
        config: meta
            .and_then(|m| m.get("config"))
            .and_then(|c| serde_json::from_value(c.clone()).ok()),
        final_target_entropy: meta
            .and_then(|m| m.get("final_target_entropy"))
            .and_then(serde_json::Value::as_f64),
        report,
        risk: None,
    })
}

impl CliError {
    fn prefixed(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

fn cmd_report(ctx: &Context, checkpoints: &[PathBuf], manifest: Option<&Path>) -> Result<(), CliError> {
    let ds = ctx.cfg.dataset()?;
    if !ds.has_target_truth() {
        return Err(CliError::usage("target truth required"));
    }
    let mut entries = Vec::new();
    for p in checkpoints {
        entries.push(entry_for(p, &ds, None)?);
    }
    let sweep = match manifest {
        Some(path) => {
            let sweep = SweepResult::read_manifest(path)?;
            let root = path.parent().unwrap_or(Path::new("."));
            for (phase, runs) in [("phase1", &sweep.phase1), ("phase2", &sweep.phase2)] {
                for r in runs {
                    let Some(ck) = &r.checkpoint_path else { continue };
                    let label = format!("{phase} lambda={} beta={}", r.lambda, r.beta);
                    let mut e = entry_for(&root.join(ck), &ds, Some(label))?;
                    e.risk = r.risk;
                    entries.push(e);
                }
            }
            Some(sweep)
        }
        None => None,
    };
    let out = ctx.out_dir()?;
    evalreport::emit_report(&entries, sweep.as_ref(), out)?;
    println!("{}", out.join("summary.json").display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::Gen { spec } = &cli.command {
        return cmd_gen(cli, spec);
    }
    let ctx = Context::new(cli)?;
    match &cli.command {
        Command::Gen { .. } => unreachable!(),
        Command::Train { lambda, beta, epochs } => cmd_train(&ctx, *lambda, *beta, *epochs),
        Command::Sweep => cmd_sweep(&ctx),
        Command::Eval { checkpoints } => cmd_report(&ctx, checkpoints, None),
        Command::Report { checkpoints, manifest } => {
            if checkpoints.is_empty() && manifest.is_none() {
                return Err(CliError::usage("report needs --checkpoint or --manifest"));
            }
            cmd_report(&ctx, checkpoints, manifest.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MEDM_LOG_LEVEL", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
