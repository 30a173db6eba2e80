use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "calibforge", version, about = "Confidence-calibrated training through stochastic inference")]
pub struct Cli {
    /// Worker threads; 1 forces fully deterministic scheduling.
    #[arg(long, global = true, env = "CALIBFORGE_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write model.json, trainlog.csv and config.json.
    Train(TrainArgs),
    /// Evaluate a trained run on one of its splits.
    Eval(EvalArgs),
    /// Fit a softmax temperature on a holdout and report before/after calibration.
    Temp(TempArgs),
    /// Train VWCI models over a list of sample counts and tabulate calibration.
    AblateT(AblateArgs),
    /// Write a synthetic blob dataset as CSV.
    GenData(GenDataArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// `blobs` for the synthetic generator, otherwise a CSV path.
    #[arg(long, default_value = "blobs")]
    pub data: String,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 1500)]
    pub per_class: usize,
    /// Half-width of the box the blob centers are drawn from.
    #[arg(long, default_value_t = 10.0)]
    pub spread: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Fraction of labels replaced by a different class.
    #[arg(long, default_value_t = 0.2)]
    pub label_noise: f64,
    /// Train, holdout and test proportions; normalized to sum to one.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub split: Vec<f64>,
    /// Z-score features with training-split statistics.
    #[arg(long)]
    pub standardize: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [64, 64])]
    pub hidden: Vec<usize>,
    /// Dropout keep probability after each hidden layer.
    #[arg(long, default_value_t = 0.5)]
    pub keep: f64,
    #[arg(long, default_value_t = 0)]
    pub residual_blocks: usize,
    /// Survival probability of each residual block.
    #[arg(long, default_value_t = 1.0)]
    pub survival: f64,
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    /// One of baseline, ci, vwci, entropy-ci [default: baseline; vwci for ablate-t].
    #[arg(long)]
    pub loss: Option<String>,
    /// CI weight on KL(U || p); required with `--loss ci`.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Entropy weight; required with `--loss entropy-ci`.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Stochastic passes T per example for VWCI.
    #[arg(long, default_value_t = 5)]
    pub samples: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    /// one-minus-bc or bc.
    #[arg(long, default_value = "one-minus-bc")]
    pub alpha_mode: String,
    /// Use a constant normalized variance instead of the measured one.
    #[arg(long)]
    pub forced_alpha: Option<f64>,
    /// Backpropagate through the normalized variance.
    #[arg(long)]
    pub alpha_gradient: bool,
    /// Backpropagate through the first stochastic pass only.
    #[arg(long)]
    pub first_sample_grad: bool,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.2)]
    pub decay: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [30, 60, 80])]
    pub milestones: Vec<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write checkpoint-<epoch>.json every k epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint to evaluate instead of `<run>/model.json`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// CSV file to evaluate instead of a split of the run's data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// train, holdout or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Number of bins M.
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// max or truth.
    #[arg(long, default_value = "max")]
    pub bin_key: String,
    /// Average T stochastic passes and record per-example normalized variance.
    #[arg(long)]
    pub stochastic: Option<usize>,
    #[arg(long, default_value = "one-minus-bc")]
    pub alpha_mode: String,
    /// Bins of the variance histogram.
    #[arg(long, default_value_t = 10)]
    pub variance_bins: usize,
    /// equal-width or equal-count.
    #[arg(long, default_value = "equal-width")]
    pub variance_binning: String,
    /// Seed for inference masks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to `<run>/eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TempArgs {
    /// Directory written by `train`.
    #[arg(long, conflicts_with = "logits")]
    pub run: Option<PathBuf>,
    /// 1: fit on the training set; 2: fit on the holdout split.
    #[arg(long, default_value_t = 2)]
    pub case: u8,
    /// Logit dump (`id,label,logit_0,...`) to fit on instead of a run.
    #[arg(long, required_unless_present = "run")]
    pub logits: Option<PathBuf>,
    /// Logit dump to report on; defaults to the run's test split.
    #[arg(long, requires = "logits")]
    pub eval_logits: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, default_value = "max")]
    pub bin_key: String,
    /// Defaults to `<run>/temp`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Sample counts to compare.
    #[arg(long = "t-list", value_delimiter = ',', default_values_t = [1, 2, 5, 10, 30])]
    pub t_list: Vec<usize>,
    /// Replicates per T, using seeds `seed..seed+seeds`.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, default_value = "max")]
    pub bin_key: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}
