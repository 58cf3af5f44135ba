use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use quantease::{OutlierMode, SolverId};

#[derive(Debug, Parser)]
#[command(name = "quantease", version, about = "Layer-wise post-training quantization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Log level for diagnostics on stderr.
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic layer: <OUT>_w.qezt (q×p) and <OUT>_x.qezt (p×n).
    Gen(GenArgs),
    /// Quantize one layer and write a solution file.
    Quantize(QuantizeArgs),
    /// Recompute a solution's metrics and check them against its footer.
    Eval(EvalArgs),
    /// Run a bench config and write a report.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub q: usize,
    #[arg(long)]
    pub p: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 1.0)]
    pub weight_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output prefix.
    #[arg(long)]
    pub out: PathBuf,
}

/// Where the calibration statistics come from.
#[derive(Debug, Args)]
pub struct LayerInput {
    /// Weights tensor, q×p.
    #[arg(long)]
    pub weights: PathBuf,
    /// Calibration inputs X, p×n.
    #[arg(long, conflicts_with = "gram", required_unless_present = "gram")]
    pub calib: Option<PathBuf>,
    /// Precomputed Σ = XXᵀ, p×p, instead of --calib.
    #[arg(long)]
    pub gram: Option<PathBuf>,
    /// Sample count recorded with --gram.
    #[arg(long, requires = "gram", default_value_t = 0)]
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Rtn,
    Gptq,
    Awq,
    Quantease,
    QuanteaseAccel,
    QuanteaseModified,
    QuanteaseOutlier,
}

impl Method {
    pub fn solver(self) -> SolverId {
        match self {
            Method::Rtn => SolverId::Rtn,
            Method::Gptq => SolverId::Gptq,
            Method::Awq => SolverId::Awq,
            Method::Quantease => SolverId::QuantEase,
            Method::QuanteaseAccel => SolverId::QuantEaseAccel,
            Method::QuanteaseModified => SolverId::QuantEaseModified,
            Method::QuanteaseOutlier => SolverId::QuantEaseOutlier,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutlierModeArg {
    Unstructured,
    Columns,
}

impl From<OutlierModeArg> for OutlierMode {
    fn from(m: OutlierModeArg) -> Self {
        match m {
            OutlierModeArg::Unstructured => OutlierMode::Unstructured,
            OutlierModeArg::Columns => OutlierMode::StructuredColumns,
        }
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub input: LayerInput,
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub bits: u32,
    #[arg(long, default_value_t = 25)]
    pub iters: usize,
    /// Every iteration divisible by this skips quantization (0 disables).
    #[arg(long, default_value_t = 3)]
    pub cadence: usize,
    #[arg(long)]
    pub strict_descent: bool,
    /// Outlier budget as a percentage of the weights (quantease-outlier only).
    #[arg(long)]
    pub outlier_pct: Option<f64>,
    #[arg(long, value_enum)]
    pub outlier_mode: Option<OutlierModeArg>,
    /// GPTQ damping as a fraction of mean diag(Σ).
    #[arg(long, default_value_t = 0.01)]
    pub damping: f64,
    #[arg(long, default_value_t = 128)]
    pub block_size: usize,
    /// AWQ grid points per axis.
    #[arg(long, default_value_t = 20)]
    pub grid_steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: LayerInput,
    #[arg(long)]
    pub solution: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// TOML bench config.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}
