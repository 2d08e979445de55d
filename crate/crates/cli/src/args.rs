use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "nw", version, about = "Train, evaluate and inspect Nadaraya-Watson head models")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset CSV with train/val/test tags.
    Generate(GenerateArgs),
    /// Train a feature extractor with the NW or FC head.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Evaluate across support sizes for random, cluster and cc modes.
    SweepK(SweepArgs),
    /// Most helpful and most harmful support entries for one query.
    Influence(InfluenceArgs),
    /// Select a temperature on the validation split and re-evaluate test.
    Calibrate(CalibrateArgs),
    /// Write the support set of an inference mode as CSV.
    Support(SupportArgs),
    /// Serve the inspector HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Blobs,
    Rings,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "blobs")]
    pub kind: Generator,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Minimum distance between blob centers.
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Ring radii for `--kind rings`.
    #[arg(long, default_value_t = 1.0)]
    pub inner: f64,
    #[arg(long, default_value_t = 3.0)]
    pub outer: f64,
    /// Train, val and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.6, 0.2, 0.2])]
    pub split: Vec<f64>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadArg {
    Nw,
    Fc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingArg {
    PerQuery,
    PerBatch,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "nw")]
    pub head: HeadArg,
    /// Support size per episode.
    #[arg(long, default_value_t = 10)]
    pub ns: usize,
    /// Queries per mini-batch.
    #[arg(long, default_value_t = 4)]
    pub nb: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub wd: f64,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Steps at which the learning rate is divided by 10.
    #[arg(long, value_delimiter = ',', default_values_t = [1000, 1500])]
    pub decay_steps: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [64, 64])]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub embed_dim: usize,
    /// Training temperature.
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.0)]
    pub label_smoothing: f64,
    #[arg(long, value_enum, default_value = "per-query")]
    pub support_sampling: SamplingArg,
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    #[arg(long)]
    pub seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// JSONL training log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Full,
    Random,
    Cluster,
    Cc,
}

impl ModeArg {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeArg::Full => "full",
            ModeArg::Random => "random",
            ModeArg::Cluster => "cluster",
            ModeArg::Cc => "cc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

/// Checkpoint, data and support-set selection shared by the read-only commands.
#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    pub mode: ModeArg,
    /// Entries per class for random, cluster and cc modes.
    #[arg(long)]
    pub k: Option<usize>,
    /// Required for every mode except full.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 15)]
    pub bins: usize,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ModeArg::Random, ModeArg::Cluster, ModeArg::Cc])]
    pub modes: Vec<ModeArg>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 8])]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 15)]
    pub bins: usize,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct InfluenceArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub query_id: String,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    pub mode: ModeArg,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.5)]
    pub grid_lo: f64,
    #[arg(long, default_value_t = 3.0)]
    pub grid_hi: f64,
    #[arg(long, default_value_t = 100)]
    pub grid_steps: usize,
    #[arg(long, default_value_t = 15)]
    pub bins: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SupportArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Directory of built UI assets to serve at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}
