use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "epk", version, about = "Train checkpointed networks and rebuild them as path-kernel machines")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "EPK_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dataset generation and conversion.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train by full-batch gradient descent, checkpointing every step.
    Train(TrainArgs),
    /// Kernel predictions for a set of inputs.
    Predict(PredictArgs),
    /// Model logits next to path-kernel logits, per input and quadrature size.
    Compare(CompareArgs),
    /// Per-step gap between the path kernel and its single-point baselines.
    Align(PointArgs),
    /// Aggregated path-kernel Gram matrix over a point set.
    Gram(GramArgs),
    /// Gaussian-process posterior field under the path kernel.
    Gp(GpArgs),
    /// Contribution of every training point to one prediction.
    Contrib(PointArgs),
    /// Accuracy, loss and norm along the straight line from w_0 to w_N.
    Pathdiag(PathdiagArgs),
    /// Run a full experiment described by a JSON config.
    Run(RunArgs),
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Isotropic Gaussian classes.
    GenBlobs(GenBlobsArgs),
    /// Convert an IDX image/label pair to CSV.
    Mnist(MnistArgs),
}

#[derive(Debug, Args)]
pub struct GenBlobsArgs {
    /// Blob spec JSON; the three-class 100-dimensional default when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Seed for the default spec.
    #[arg(long, default_value_t = 0, conflicts_with = "spec")]
    pub seed: u64,
    /// Points per class for the default spec.
    #[arg(long, conflicts_with = "spec")]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MnistArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    /// Skip this many examples of each digit first.
    #[arg(long, default_value_t = 0)]
    pub skip_per_class: usize,
    /// Average-pool to this side length.
    #[arg(long)]
    pub downsample: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config JSON: model, lr, steps, seed, optional loss.
    #[arg(long)]
    pub config: PathBuf,
    /// Training set CSV (`x0..,label`).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Epk,
    Dpk,
    Ntk0,
    #[value(name = "ntkN")]
    NtkN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleArg {
    Left,
    Midpoint,
}

#[derive(Debug, Args)]
pub struct KernelInputs {
    #[arg(long)]
    pub traj: PathBuf,
    /// Training set the trajectory was fitted on.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub kernel: KernelInputs,
    /// Query points CSV (`x0..`, optional `label`).
    #[arg(long, alias = "points")]
    pub inputs: PathBuf,
    #[arg(long, value_enum, default_value = "epk")]
    pub method: MethodArg,
    /// Quadrature nodes per step.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, value_enum, default_value = "left")]
    pub rule: RuleArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub kernel: KernelInputs,
    #[arg(long, alias = "points")]
    pub inputs: PathBuf,
    /// One or more quadrature sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "100")]
    pub steps: Vec<usize>,
    #[arg(long, value_enum, default_value = "left")]
    pub rule: RuleArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PointArgs {
    #[command(flatten)]
    pub kernel: KernelInputs,
    #[arg(long, alias = "points")]
    pub inputs: PathBuf,
    /// Row of the inputs file to analyse.
    #[arg(long, default_value_t = 0)]
    pub point: usize,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, value_enum, default_value = "left")]
    pub rule: RuleArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GramArgs {
    #[command(flatten)]
    pub kernel: KernelInputs,
    #[arg(long, alias = "inputs")]
    pub points: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, value_enum, default_value = "left")]
    pub rule: RuleArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the symmetry and eigenvalue check as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    /// Log of label-smoothed one-hot vectors.
    Labels,
    /// Final model logits at the training points.
    Model,
}

#[derive(Debug, Args)]
pub struct GpArgs {
    #[command(flatten)]
    pub kernel: KernelInputs,
    /// `x0:x1:nx,y0:y1:ny` over the first two input dimensions, or a CSV of points.
    #[arg(long)]
    pub grid: String,
    /// Training points used as observations, spread evenly over the dataset.
    #[arg(long, default_value_t = 30)]
    pub train_points: usize,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, value_enum, default_value = "left")]
    pub rule: RuleArg,
    #[arg(long, default_value_t = 1000)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Jitter as a multiple of the mean Gram diagonal.
    #[arg(long, default_value_t = 1e-8)]
    pub jitter: f64,
    /// Absolute jitter; overrides `--jitter`.
    #[arg(long)]
    pub jitter_abs: Option<f64>,
    #[arg(long, value_enum, default_value = "labels")]
    pub targets: TargetArg,
    #[arg(long, default_value_t = 0.1)]
    pub label_smoothing: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PathdiagArgs {
    #[command(flatten)]
    pub kernel: KernelInputs,
    #[arg(long, default_value_t = 21)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}
