use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "pfcm", version, about = "Poisson flow consistency models for paired image denoising")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a directory of clean/noisy phantom pairs.
    PhantomGen(PhantomGenArgs),
    /// Train a PFGM++ teacher on paired data.
    Pretrain(PretrainArgs),
    /// Distill a teacher checkpoint into a single-step consistency model.
    Distill(DistillArgs),
    /// Denoise one image or every noisy image of a dataset.
    Denoise(DenoiseArgs),
    /// Search hijack indices and mixing weights on a validation set.
    Gridsearch(GridArgs),
    /// Score a sampler on a validation set.
    Evaluate(EvaluateArgs),
    /// Compare vanilla, hijack, regularization and both on a validation set.
    Ablate(AblateArgs),
}

/// Settings shared by every subcommand. Values resolve as
/// flag > `PFCM_SEED` (seed only) > config file > built-in default.
#[derive(Debug, Args)]
pub struct Common {
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "PFCM_SEED")]
    pub seed: Option<u64>,
    /// Augmentation dimension D.
    #[arg(long)]
    pub d: Option<f64>,
    #[arg(long)]
    pub sigma_min: Option<f64>,
    #[arg(long)]
    pub sigma_max: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub n_steps: Option<usize>,
    #[arg(long)]
    pub sigma_data: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// Image side length.
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    /// Relative dose of the noisy images.
    #[arg(long, default_value_t = 0.25)]
    pub dose: f64,
    #[arg(long, default_value_t = 1.0)]
    pub kernel_width: f64,
    #[arg(long, default_value_t = 0.025)]
    pub full_dose_std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArchKind {
    Unet,
    Pixel,
}

#[derive(Debug, Args)]
pub struct ArchArgs {
    #[arg(long, value_enum, default_value_t = ArchKind::Unet)]
    pub arch: ArchKind,
    /// Channels at the first U-Net level.
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    /// Comma-separated channel multipliers, one per U-Net level.
    #[arg(long, default_value = "1,2", value_delimiter = ',')]
    pub mults: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub emb_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub freqs: usize,
    /// Hidden units of the per-pixel toy network.
    #[arg(long, default_value_t = 2)]
    pub hidden: usize,
}

#[derive(Debug, Args)]
pub struct LoopArgs {
    /// Random square crop size; whole images when omitted.
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
    /// Save intermediate checkpoints every k iterations.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Training state file to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Record wallclock seconds in the loss trace (breaks byte-reproducibility).
    #[arg(long)]
    pub record_wallclock: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WeightingArg {
    Unit,
    Edm,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by `phantom-gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub train: LoopArgs,
    #[arg(long, value_enum, default_value_t = WeightingArg::Unit)]
    pub weighting: WeightingArg,
    /// Mean of ln(sigma) for the training noise levels.
    #[arg(long, default_value_t = -1.2, allow_negative_numbers = true)]
    pub p_mean: f64,
    /// Standard deviation of ln(sigma) for the training noise levels.
    #[arg(long, default_value_t = 1.2)]
    pub p_std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    L2,
    PseudoHuber,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Frozen PFGM++ teacher checkpoint.
    #[arg(long)]
    pub teacher: PathBuf,
    /// Student initialization; defaults to the teacher weights.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// EMA decay of the target network.
    #[arg(long, default_value_t = 0.95)]
    pub mu: f64,
    #[arg(long, value_enum, default_value_t = MetricArg::PseudoHuber)]
    pub metric: MetricArg,
    #[command(flatten)]
    pub train: LoopArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Vanilla,
    Task,
    Hijack,
    Reg,
    Heun,
}

/// Task-sampler settings; `--i` and `--sigma-hat` are alternatives.
#[derive(Debug, Args)]
pub struct TaskArgs {
    /// 1-based index into the descending schedule (1 is sigma_max).
    #[arg(long, conflicts_with = "sigma_hat")]
    pub i: Option<usize>,
    #[arg(long)]
    pub sigma_hat: Option<f64>,
    /// Weight of the denoised image in the final mix.
    #[arg(long)]
    pub w: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[command(flatten)]
    pub common: Common,
    /// Model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// An image (`.f32` or its `.json` sidecar) or a dataset directory.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = SamplerArg::Task)]
    pub sampler: SamplerArg,
    #[command(flatten)]
    pub task: TaskArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CriterionArg {
    Psnr,
    Ssim,
    External,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    /// Validation dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Hijack indices, e.g. `30..40` or `30,32,34`.
    #[arg(long, default_value = "30..40")]
    pub i_grid: String,
    /// Mixing weights, e.g. `0.5,0.6,0.7,0.8,0.9,1.0`.
    #[arg(long, default_value = "0.5,0.6,0.7,0.8,0.9,1.0", value_delimiter = ',')]
    pub w_grid: Vec<f64>,
    #[arg(long, value_enum, default_value_t = CriterionArg::Psnr)]
    pub criterion: CriterionArg,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SamplerArg::Task)]
    pub sampler: SamplerArg,
    #[command(flatten)]
    pub task: TaskArgs,
    /// Take sigma_hat and w from a `gridsearch` result.
    #[arg(long, conflicts_with_all = ["i", "sigma_hat", "w"])]
    pub grid: Option<PathBuf>,
    /// Metric reported as the headline score.
    #[arg(long, value_enum, default_value_t = CriterionArg::Psnr)]
    pub criterion: CriterionArg,
    /// Also write |output - clean| images.
    #[arg(long)]
    pub dump_diff: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, conflicts_with_all = ["i", "sigma_hat", "w"])]
    pub grid: Option<PathBuf>,
}
