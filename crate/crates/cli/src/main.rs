//! `scatterfusion` command-line tool.
//!
//! Exit codes: 0 success, 1 data or contract errors, 2 usage or config errors.

mod commands;
mod config;
mod manifest;

use std::ops::RangeInclusive;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scatterfusion::dataio::{MissingPolicy, Split, SynthKind};
use scatterfusion::forecaster::Ablation;
use scatterfusion::Error;

#[derive(Debug, Parser)]
#[command(
    name = "scatterfusion",
    version,
    about = "Wavelet scattering forecaster: training, evaluation and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scattering coefficients of every column of a CSV file.
    Scatter(ScatterArgs),
    /// Trend / seasonal / residual decomposition of every column.
    Decompose(DecomposeArgs),
    /// Train a model and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Forecast every window of a split with a trained checkpoint.
    Predict(PredictArgs),
    /// Metrics of one or more checkpoints, with an ablation delta table.
    Evaluate(EvaluateArgs),
    /// Translation and deformation stability report of the scattering front end.
    CheckInvariance(InvarianceArgs),
    /// Forward wall time against input length.
    Bench(BenchArgs),
    /// Write a seeded synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration file (TOML, `schema_version = 1`); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Upper bound on worker threads; computation is single-threaded.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Reproducibility contract; always in effect.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Name of the timestamp column (auto-detected by name otherwise).
    #[arg(long)]
    pub timestamp_column: Option<String>,
    /// What to do with blank cells.
    #[arg(long, value_parser = parse_missing)]
    pub on_missing: Option<MissingPolicy>,
}

#[derive(Debug, Args)]
pub struct ScatterArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Largest scale.
    #[arg(long = "J", default_value_t = 4)]
    pub j_max: u32,
    #[arg(long, default_value_t = scatterfusion::filterbank::DEFAULT_KERNEL_LEN)]
    pub kernel_len: usize,
    /// Keep every sample instead of subsampling by 2^(J-1).
    #[arg(long)]
    pub full_length: bool,
    /// Also write the effective filters to filters.csv.
    #[arg(long)]
    pub dump_filters: bool,
    /// Use the learned kernels of a trained checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Seasonal period; detected from the data when omitted.
    #[arg(long)]
    pub period: Option<usize>,
    /// Largest lag searched when detecting the period.
    #[arg(long, default_value_t = 512)]
    pub max_lag: usize,
}

#[derive(Debug, Default, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub input_len: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_attn: Option<usize>,
    #[arg(long = "J")]
    pub j_max: Option<u32>,
    /// Comma-separated MRTA strides, e.g. 1,2,4.
    #[arg(long, value_delimiter = ',')]
    pub strides: Option<Vec<usize>>,
    #[arg(long)]
    pub mrta_layers: Option<usize>,
    #[arg(long)]
    pub period: Option<usize>,
    /// Seed for parameter initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub window_stride: Option<usize>,
    #[arg(long)]
    pub eval_stride: Option<usize>,
    /// Forbid evaluation windows from reading the previous split.
    #[arg(long)]
    pub strict_boundary: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Train with one block removed.
    #[arg(long, value_parser = parse_ablation)]
    pub ablate: Option<Ablation>,
    /// Continue from a state.ckpt written by an earlier run; its stored
    /// configuration is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long)]
    pub strict_boundary: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoints to compare; the first is the reference row.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// Also evaluate the first checkpoint with this block bypassed.
    #[arg(long, value_parser = parse_ablation)]
    pub ablate: Vec<Ablation>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long)]
    pub strict_boundary: bool,
    /// Add persistence and least-squares rows.
    #[arg(long)]
    pub baselines: bool,
}

#[derive(Debug, Args)]
pub struct InvarianceArgs {
    #[command(flatten)]
    pub common: Common,
    /// Scales to sweep, as `a..b` (inclusive) or a comma list.
    #[arg(long = "J", default_value = "3..6", value_parser = parse_scales)]
    pub scales: Scales,
    #[arg(long, default_value_t = 10)]
    pub signals: usize,
    #[arg(long, default_value_t = 1024)]
    pub length: usize,
    #[arg(long, default_value_t = 16)]
    pub shift: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Measure with the learned kernels of a trained checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Comma-separated input lengths.
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// sine | sine+trend | sine+trend+noise | am-modulated | warped
    #[arg(long, value_parser = parse_kind)]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub period: Option<f64>,
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long)]
    pub slope: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Scales(pub Vec<u32>);

fn parse_scales(s: &str) -> Result<Scales, String> {
    let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("{v:?}: {e}"));
    let values: Vec<u32> = match s.split_once("..") {
        Some((a, b)) => {
            let b = b.strip_prefix('=').unwrap_or(b);
            let range: RangeInclusive<u32> = parse(a)?..=parse(b)?;
            range.collect()
        }
        None => s.split(',').map(parse).collect::<Result<_, _>>()?,
    };
    if values.len() < 2 {
        return Err("need at least two scales".into());
    }
    Ok(Scales(values))
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<SynthKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_missing(s: &str) -> Result<MissingPolicy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Scatter(a) => commands::scatter(a),
        Command::Decompose(a) => commands::decompose(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::CheckInvariance(a) => commands::check_invariance(a),
        Command::Bench(a) => commands::bench(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
