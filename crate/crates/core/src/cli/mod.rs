//! Command-line front end: argument parsing, experiment configs, commands.

pub mod commands;
pub mod config;
pub mod figures;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{Split, SynthConfig};
use crate::diagnostics::DEFAULT_BAND;
use crate::error::{Error, Result};
use crate::metrics::{Connectivity, Conventions};
use commands::{EvalSource, TrainRunOptions};
pub use config::ExperimentConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "nerd", version, about = "Segmentation experiments with coordinate-conditioned heads")]
pub struct Cli {
    /// Config file (TOML); its meaning depends on the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed or comma-separated seeds, overriding the config.
    #[arg(long, visible_alias = "seed", global = true, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Crop, normalize and slice raw volumes listed in a manifest.
    Prepare(PrepareArgs),
    /// Generate the synthetic border-bias dataset.
    Synth,
    /// Train one model per seed from an experiment config.
    Train(TrainArgs),
    /// Score a checkpoint or a directory of predictions.
    Evaluate(EvaluateArgs),
    /// Per-position feature statistics, heat maps and shift score.
    Diagnose(DiagnoseArgs),
    /// Comparison table and overlay panels across run directories.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Volume manifest (defaults to `--config`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Stop after this many epochs; rerunning resumes.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Predicted masks in the dataset layout.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Prepared dataset with the ground truth.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// 4 or 8 (in-plane), 6 or 26 (3D).
    #[arg(long)]
    pub connectivity: Option<u32>,
    #[arg(long)]
    pub ldice_factor: Option<u32>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = DEFAULT_BAND)]
    pub band: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Training output directories or single seed directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Test-split slice indices to render as overlay panels.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub slices: Vec<usize>,
}

/// Exit code for an error: 2 for broken internal invariants, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::ContractViolation(_) | Error::Shape(_) => EXIT_INTERNAL,
        _ => EXIT_USER,
    }
}

/// The machine-readable line printed on stderr for a failed command.
pub fn error_line(kind: &str, message: &str, code: i32) -> String {
    serde_json::json!({ "error": kind, "message": message, "exit_code": code }).to_string()
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| Error::InvalidArgument("--out is required".into()))
}

fn single_seed(cli: &Cli) -> Result<Option<u64>> {
    match cli.seeds.as_slice() {
        [] => Ok(None),
        [s] => Ok(Some(*s)),
        _ => Err(Error::InvalidArgument("this command takes a single seed".into())),
    }
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string(value).expect("plain json"));
}

pub fn run(cli: Cli) -> Result<()> {
    if !cli.device.eq_ignore_ascii_case("cpu") {
        return Err(Error::Config(format!("device `{}` is not available, only `cpu` is supported", cli.device)));
    }
    match &cli.command {
        Command::Prepare(args) => {
            let manifest = args
                .manifest
                .as_deref()
                .or(cli.config.as_deref())
                .ok_or_else(|| Error::InvalidArgument("prepare needs --manifest or --config".into()))?;
            let summary = commands::cmd_prepare(manifest, require_out(&cli)?)?;
            print_json(&serde_json::json!({ "written": summary.written, "skipped": summary.skipped }));
        }
        Command::Synth => {
            let mut cfg = match &cli.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    toml::from_str::<SynthConfig>(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
                }
                None => SynthConfig::default(),
            };
            if let Some(s) = single_seed(&cli)? {
                cfg.seed = s;
            }
            print_json(&commands::cmd_synth(&cfg, require_out(&cli)?)?);
        }
        Command::Train(args) => {
            let path = cli.config.as_deref().ok_or_else(|| Error::InvalidArgument("train needs --config".into()))?;
            let mut cfg = ExperimentConfig::load(path)?;
            if !cli.seeds.is_empty() {
                cfg.seeds = cli.seeds.clone();
            }
            cfg.train.device = cli.device.to_ascii_lowercase();
            let out = cli
                .out
                .clone()
                .or_else(|| cfg.out.clone())
                .ok_or_else(|| Error::InvalidArgument("train needs --out or `out` in the config".into()))?;
            let opts = TrainRunOptions { stop_after: args.stop_after, verbose: !args.quiet };
            for r in commands::cmd_train(&cfg, &out, &opts)? {
                let dice = r.report.as_ref().and_then(|rep| rep.summary("dice")).and_then(|s| s.mean);
                print_json(&serde_json::json!({
                    "seed": r.seed,
                    "dir": r.dir,
                    "epochs": r.history.records.len(),
                    "selected_epoch": r.history.selected_epoch,
                    "test_dice": dice,
                }));
            }
        }
        Command::Evaluate(args) => {
            let defaults = match &cli.config {
                Some(p) => ExperimentConfig::load(p)?.evaluation,
                None => config::EvaluationSection::default(),
            };
            let conventions = Conventions {
                connectivity: match args.connectivity {
                    Some(c) => Connectivity::try_from(c)?,
                    None => defaults.connectivity,
                },
                ldice_factor: args.ldice_factor.unwrap_or(defaults.ldice_factor),
            };
            let source = match (&args.checkpoint, &args.predictions) {
                (Some(c), _) => EvalSource::Checkpoint(c),
                (None, Some(p)) => EvalSource::Predictions(p),
                (None, None) => return Err(Error::InvalidArgument("give --checkpoint or --predictions".into())),
            };
            let threshold = args.threshold.unwrap_or(defaults.threshold);
            let report = commands::cmd_evaluate(source, &args.dataset, args.split, &conventions, threshold, require_out(&cli)?)?;
            print_json(&report.aggregate);
        }
        Command::Diagnose(args) => {
            let r = commands::cmd_diagnose(&args.checkpoint, &args.dataset, args.split, args.band, args.batch_size, require_out(&cli)?)?;
            print_json(&r);
        }
        Command::Report(args) => {
            let summary = commands::cmd_report(&args.runs, &args.slices, require_out(&cli)?)?;
            print_json(&summary);
        }
    }
    Ok(())
}
