use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metaage::losses::TargetMode;
use metaage::training::ModelKind;
use serde::Serialize;

/// Personalized age estimation from age and identity feature vectors.
#[derive(Debug, Parser)]
#[command(name = "metaage", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark and its oracle.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a feature file.
    Eval(EvalArgs),
    /// Train and evaluate over a lambda x delta grid.
    Sweep(SweepArgs),
    /// Rank gallery samples by distance between generated weights.
    Retrieve(RetrieveArgs),
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    /// Flat `key=value` file; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub identities: usize,
    #[arg(long, default_value_t = 10)]
    pub per_identity: usize,
    /// Number of age classes K.
    #[arg(long, default_value_t = 101)]
    pub k: usize,
    #[arg(long, default_value_t = 64)]
    pub age_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub identity_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub latent_dim: usize,
    /// Largest personal offset in years.
    #[arg(long, default_value_t = 5.0, allow_negative_numbers = true)]
    pub offset_max: f64,
    #[arg(long, default_value_t = 0.01, allow_negative_numbers = true)]
    pub noise: f64,
    #[arg(long, default_value_t = 3.0)]
    pub rbf_width: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Fraction of identities in the training file.
    #[arg(long, default_value_t = 0.8, allow_negative_numbers = true)]
    pub train_frac: f64,
    /// Use fold `--fold` of a k-fold identity split instead of `--train-frac`.
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long, default_value_t = 0, requires = "folds")]
    pub fold: usize,
    /// Split seed; defaults to `--seed`.
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetArg {
    #[value(alias = "hard")]
    HardOnehot,
    #[value(alias = "ld")]
    LabelDistribution,
}

impl From<TargetArg> for TargetMode {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::HardOnehot => TargetMode::HardOnehot,
            TargetArg::LabelDistribution => TargetMode::LabelDistribution,
        }
    }
}

/// Optimization and loss settings shared by `train` and `sweep`.
#[derive(Debug, Args, Serialize)]
pub struct TrainOpts {
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    /// Weight of the ordinal loss.
    #[arg(long, default_value_t = 0.2, allow_negative_numbers = true)]
    pub lambda: f64,
    /// Ordinal margin.
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    pub delta: f64,
    #[arg(long, value_enum, default_value_t = TargetArg::HardOnehot)]
    pub target: TargetArg,
    /// Hidden units H of the residual (or concat) network.
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    /// Train a D x D affine map on the age features.
    #[arg(long)]
    pub adapter: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "metaage")]
    pub model: ModelKind,
    /// MAFV1 training file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Largest CS threshold in years.
    #[arg(long, default_value_t = 10)]
    pub theta_max: u32,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "metaage")]
    pub model: ModelKind,
    /// MAFV1 training file.
    #[arg(long)]
    pub data: PathBuf,
    /// MAFV1 file the MAE is measured on.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.5")]
    pub lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub deltas: Vec<f64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: TrainOpts,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// A metaage checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    /// Separate query file; without it every gallery sample queries the rest.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Size of the top and bottom slices, in percent of the gallery.
    #[arg(long, default_value_t = 10.0)]
    pub percent: f64,
    /// `oracle.json` from `synth`, to also score offset-sign agreement.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Keep only this many ranked items per query in the report.
    #[arg(long)]
    pub max_ranked: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}
