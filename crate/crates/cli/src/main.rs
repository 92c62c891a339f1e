//! `cleftnet` command-line driver.

mod commands;
mod config;
mod manifest;
mod pgm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use cleftnet::autodiff::OpKind;
use cleftnet::model::Variant;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<cleftnet::Error> for CliError {
    fn from(e: cleftnet::Error) -> Self {
        match e {
            cleftnet::Error::Config(m) => CliError::Config(m),
            cleftnet::Error::Numerical(m) => CliError::Numerical(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "cleftnet", version, about = "Synaptic cleft detection with feature and label augmentors")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every randomised stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Voxel spacing `dz,dy,dx`.
    #[arg(long, global = true, value_parser = parse_triple::<f64>)]
    spacing: Option<[f64; 3]>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic train/validation volume pair.
    Synth,
    /// Train a model on sampled patches.
    Train(TrainArgs),
    /// Predict a volume with a trained model.
    Infer(InferArgs),
    /// Score a prediction against ground truth.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Convert a CREMI HDF5 file into a volume pair.
    Import(ImportArgs),
    /// Print the resolved configuration.
    Config,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory holding `train` and (optionally) `val` volumes.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Total iteration count (overrides the configuration).
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Continue from a checkpoint that carries training state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Volume stem (`<stem>.raw.vol1`).
    #[arg(long)]
    volume: PathBuf,
    /// Tile overlap `d,h,w`; overlapping predictions are averaged.
    #[arg(long, value_parser = parse_triple::<usize>)]
    overlap: Option<[usize; 3]>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted probabilities (a VOL1 field).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth volume stem.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    /// Additional thresholds, comma separated; one report each.
    #[arg(long, value_delimiter = ',')]
    sweep: Vec<f64>,
    /// Export this many z-slices as raw/gt/pred graymap panels.
    #[arg(long)]
    slices: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Fault {
    Conv3d,
    BatchNorm,
    Attention,
    GateSpatial,
    GateChannel,
    MaxPool,
    Upsample,
    Sigmoid,
    Ln,
}

impl Fault {
    fn kind(self) -> OpKind {
        match self {
            Fault::Conv3d => OpKind::Conv3d,
            Fault::BatchNorm => OpKind::BatchNorm,
            Fault::Attention => OpKind::Attention,
            Fault::GateSpatial => OpKind::GateSpatial,
            Fault::GateChannel => OpKind::GateChannel,
            Fault::MaxPool => OpKind::MaxPool,
            Fault::Upsample => OpKind::Upsample,
            Fault::Sigmoid => OpKind::Sigmoid,
            Fault::Ln => OpKind::Ln,
        }
    }
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Corrupt one backward rule (negative control).
    #[arg(long, value_enum)]
    fault: Option<Fault>,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args, Debug)]
pub struct ImportArgs {
    /// CREMI HDF5 file.
    #[arg(long)]
    input: PathBuf,
    /// Stem of the written volume pair, relative to `--out`.
    #[arg(long, default_value = "volume")]
    name: String,
    #[arg(long)]
    raw_path: Option<String>,
    #[arg(long)]
    cleft_path: Option<String>,
    #[arg(long)]
    background_sentinel: Option<u64>,
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    };
    let p = |x: &str| x.parse::<T>().map_err(|_| format!("invalid value {x:?}"));
    Ok([p(a)?, p(b)?, p(c)?])
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth => commands::synth(&cli.common),
        Command::Train(a) => commands::train(&cli.common, &a),
        Command::Infer(a) => commands::infer(&cli.common, &a),
        Command::Eval(a) => commands::eval(&cli.common, &a),
        Command::Gradcheck(a) => commands::gradcheck(&cli.common, &a),
        Command::Import(a) => commands::import(&cli.common, &a),
        Command::Config => commands::print_config(&cli.common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
