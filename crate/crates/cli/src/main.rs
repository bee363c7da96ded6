//! `cct`: plan, split, train, evaluate and plot compact-transformer runs.
//!
//! Exit codes: 0 success, 2 usage, 3 data error, 4 geometry or config
//! error, 5 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use cct_core::CctError;
use clap::builder::TypedValueParser as _;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cct", version, about = "Compact convolutional transformer pipeline for binary image classification")]
struct Cli {
    /// Abort on the first non-finite value produced by any tensor op
    /// (same as setting CCT_NAN_CHECK=1).
    #[arg(long, global = true)]
    nan_check: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the tokenizer stage table, sequence length and parameter count.
    Plan(PlanArgs),
    /// Write train/validation/test split plans from two manifests.
    Split(SplitArgs),
    /// Train a model on a split plan; write a checkpoint and history CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a plan's test ids; write report JSON and ROC CSV.
    Eval(EvalArgs),
    /// Render SVG plots from history, ROC and report files.
    Report(ReportArgs),
    /// Write the synthetic stripe task as PNGs, manifests, plan and config.
    Synth(SynthArgs),
    /// k-fold cross-validation over the merged manifests.
    Cv(CvArgs),
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Run config JSON.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyName {
    /// Official train (minus validation) / official test.
    Policy1,
    /// Merge both and deal into k folds.
    Policy2,
    /// Move training samples to test until test ≈ ratio × train.
    Policy3,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long, value_enum)]
    pub policy: PolicyName,
    /// CSV with header `path,label`; paths relative to the manifest.
    #[arg(long)]
    pub train_manifest: PathBuf,
    #[arg(long)]
    pub test_manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fold count for policy2.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Target test/train ratio for policy3.
    #[arg(long, default_value_t = 0.1)]
    pub ratio: f64,
    /// Validation share of the training side, per category.
    /// Defaults to 0.1 for policy1 and 0 otherwise.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Split without regard to category.
    #[arg(long)]
    pub no_stratify: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Split plan JSON from `cct split` or `cct synth`.
    #[arg(long)]
    pub plan: PathBuf,
    /// Checkpoint path to write.
    #[arg(long)]
    pub out: PathBuf,
    /// History CSV path to write.
    #[arg(long)]
    pub history: PathBuf,
    /// Also write the history as JSON, with confusion matrices.
    #[arg(long)]
    pub history_json: Option<PathBuf>,
    /// Override `train.epochs`.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..).map(|v| v as usize))]
    pub epochs: Option<usize>,
    /// Override `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-sample gradients (0 = all); results do not depend on it.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Override `data.train_manifest`.
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    /// Override `data.test_manifest`.
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalSet {
    Test,
    Validation,
    Train,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    /// Run config JSON supplying manifests and normalization; its model
    /// section must match the checkpoint.
    #[arg(long, alias = "data")]
    pub config: Option<PathBuf>,
    /// Report JSON path to write.
    #[arg(long)]
    pub report: PathBuf,
    /// ROC CSV path to write.
    #[arg(long)]
    pub roc: Option<PathBuf>,
    /// Which of the plan's id lists to evaluate.
    #[arg(long, value_enum, default_value_t = EvalSet::Test)]
    pub set: EvalSet,
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// History CSV → accuracy.svg and loss.svg.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// ROC CSV → roc.svg.
    #[arg(long)]
    pub roc: Option<PathBuf>,
    /// Report JSON → confusion.svg.
    #[arg(long)]
    pub cm: Option<PathBuf>,
    #[arg(long)]
    pub svg_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub n_train: usize,
    #[arg(long, default_value_t = 32)]
    pub n_test: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0.25)]
    pub val_fraction: f64,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Seed for dealing the folds.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Override `train.seed`; each fold derives its own seed from it.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..).map(|v| v as usize))]
    pub epochs: Option<usize>,
    /// Folds trained concurrently (0 = all cores); results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Validation share held out of each fold's training side.
    #[arg(long, default_value_t = 0.0)]
    pub val_fraction: f64,
    #[arg(long)]
    pub no_stratify: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
}

fn exit_code(e: &CctError) -> u8 {
    match e {
        CctError::Usage(_) => 2,
        CctError::Data(_)
        | CctError::DegenerateInput(_)
        | CctError::Decode { .. }
        | CctError::Io { .. }
        | CctError::Json(_)
        | CctError::Csv(_)
        | CctError::CheckpointIntegrity(_)
        | CctError::CheckpointTruncated(_) => 3,
        CctError::TokenizerGeometry { .. }
        | CctError::Parameter(_)
        | CctError::Dimension { .. }
        | CctError::CheckpointVersion { .. }
        | CctError::CheckpointShape { .. } => 4,
        CctError::Numeric(_) => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).format_timestamp(None).init();
    if cli.nan_check {
        std::env::set_var(cct_core::numerics::NAN_CHECK_ENV, "1");
    }
    let result = match &cli.command {
        Command::Plan(a) => commands::plan(a),
        Command::Split(a) => commands::split(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Report(a) => commands::report(a),
        Command::Synth(a) => commands::synth(a),
        Command::Cv(a) => commands::cv(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
