use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Desk-scale latent text-to-image diffusion with condition adapters.
///
/// Relative paths resolve against $LADAPT_ROOT when it is set, otherwise
/// against the working directory. Options may also come from a JSON or TOML
/// key-value file given with --config (keys are long flag names); flags
/// override the file and the file overrides defaults.
#[derive(Parser, Debug, Clone)]
#[command(name = "ladapt", version)]
pub struct Cli {
    /// Key-value config file (JSON object or .toml table)
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Root seed; every random stream is derived from it [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: runs/<command>]
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Synthetic dataset generation
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Base model and adapter training
    #[command(subcommand)]
    Train(TrainCmd),
    /// Sample images, optionally guided by one or more adapters
    Sample(SampleArgs),
    /// Ablation studies
    #[command(subcommand)]
    Ablate(AblateCmd),
    /// Fidelity metrics of generated images against dataset conditions
    Metrics(MetricsArgs),
    /// Print adapter or denoiser parameter counts
    CountParams(CountArgs),
    /// Re-run a recorded run and compare its outputs bit for bit
    Replay(ReplayArgs),
}

#[derive(Subcommand, Debug, Clone)]
pub enum DatasetCmd {
    /// Render scenes, captions and condition maps to a directory
    Gen(DatasetGenArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DatasetGenArgs {
    /// Number of scenes [default: 2000]
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Image side in pixels, a multiple of 64 [default: 128]
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Background family: light or dark [default: light]
    #[arg(long)]
    pub style: Option<String>,
}

#[derive(Subcommand, Debug, Clone)]
pub enum TrainCmd {
    /// Train the base denoiser (or fine-tune one with --init)
    Base(TrainBaseArgs),
    /// Train an adapter against a frozen base denoiser
    Adapter(TrainAdapterArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainOpts {
    /// Optimizer steps; overrides --epochs
    #[arg(long)]
    pub steps: Option<usize>,
    /// Passes over the training scenes [default: 10]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 3e-4 base and adapter, 1e-4 fine-tune]
    #[arg(long)]
    pub lr: Option<f32>,
    /// Timestep sampling: uniform or cubic [default: uniform base, cubic adapter]
    #[arg(long)]
    pub sampling: Option<String>,
    /// Per-step loss weighting: noise or velocity [default: velocity base, noise adapter]
    #[arg(long)]
    pub weighting: Option<String>,
    /// Print the running loss every N steps, 0 for silent [default: 500]
    #[arg(long)]
    pub log_every: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainBaseArgs {
    /// Dataset directory from `dataset gen`
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Start from this base checkpoint instead of a fresh model
    #[arg(long, value_name = "CKPT")]
    pub init: Option<PathBuf>,
    /// UNet width of the first scale [default: 32]
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Args, Debug, Clone)]
pub struct TrainAdapterArgs {
    /// Base checkpoint (kept frozen)
    #[arg(long, value_name = "CKPT")]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// sketch, color, segmentation or depth
    #[arg(long)]
    pub kind: Option<String>,
    /// base, small or tiny [default: per kind]
    #[arg(long)]
    pub variant: Option<String>,
    /// Injection site and guided scale count, e.g. encoder:4 [default: encoder:4]
    #[arg(long)]
    pub injection: Option<String>,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Args, Debug, Clone)]
pub struct SamplerOpts {
    /// [default: 50]
    #[arg(long)]
    pub ddim_steps: Option<usize>,
    /// Stochasticity of the DDIM update [default: 0]
    #[arg(long)]
    pub eta: Option<f64>,
    /// Steps that receive guidance: all, none, stage:begin|middle|late, or a 0/1 mask [default: all]
    #[arg(long)]
    pub gate: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    #[arg(long, value_name = "CKPT")]
    pub base: Option<PathBuf>,
    /// Adapter checkpoint; repeat to compose several
    #[arg(long, value_name = "CKPT")]
    pub adapter: Vec<PathBuf>,
    /// Comma-separated weights aligned with --adapter [default: 1.0 each]
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f32>,
    /// Take captions and conditions from this dataset
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Number of dataset scenes to sample [default: 8]
    #[arg(long)]
    pub count: Option<usize>,
    /// Caption to sample instead of dataset scenes; repeatable
    #[arg(long)]
    pub prompt: Vec<String>,
    /// Condition image for each adapter in prompt mode, aligned with --adapter
    #[arg(long, value_name = "PNG")]
    pub condition: Vec<PathBuf>,
    #[command(flatten)]
    pub sampler: SamplerOpts,
}

#[derive(Subcommand, Debug, Clone)]
pub enum AblateCmd {
    /// Guidance on all steps vs each third of the steps vs none
    Stages(StagesArgs),
    /// Retrain an adapter per injection site and scale count
    Injection(InjectionArgs),
    /// Apply an adapter to a base fine-tuned on shifted data
    Generalization(GeneralizationArgs),
}

#[derive(Args, Debug, Clone)]
pub struct EvalOpts {
    /// Evaluation dataset; generated from the seed when absent
    #[arg(long)]
    pub eval_dataset: Option<PathBuf>,
    /// Scenes to evaluate [default: 64]
    #[arg(long)]
    pub eval_scenes: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct StagesArgs {
    #[arg(long, value_name = "CKPT")]
    pub base: Option<PathBuf>,
    #[arg(long, value_name = "CKPT")]
    pub adapter: Option<PathBuf>,
    #[command(flatten)]
    pub eval: EvalOpts,
    #[command(flatten)]
    pub sampler: SamplerOpts,
}

#[derive(Args, Debug, Clone)]
pub struct InjectionArgs {
    #[arg(long, value_name = "CKPT")]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub variant: Option<String>,
    /// Comma-separated injection modes [default: all twelve]
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<String>,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub eval: EvalOpts,
    #[command(flatten)]
    pub sampler: SamplerOpts,
}

#[derive(Args, Debug, Clone)]
pub struct GeneralizationArgs {
    #[arg(long, value_name = "CKPT")]
    pub base: Option<PathBuf>,
    #[arg(long, value_name = "CKPT")]
    pub adapter: Option<PathBuf>,
    /// Fine-tuning dataset; a dark-background set is generated when absent
    #[arg(long)]
    pub shifted: Option<PathBuf>,
    /// Scenes in the generated fine-tuning set [default: 2000]
    #[arg(long)]
    pub shifted_scenes: Option<usize>,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub eval: EvalOpts,
    #[command(flatten)]
    pub sampler: SamplerOpts,
}

#[derive(Args, Debug, Clone)]
pub struct MetricsArgs {
    /// Directory of generated images named 00000.png, ... (or its images/ subdirectory)
    #[arg(long)]
    pub generated: Option<PathBuf>,
    /// Dataset whose first scenes the images were generated for
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// [default: all generated images]
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct CountArgs {
    /// full-scale or desk [default: desk]
    #[arg(long)]
    pub preset: Option<String>,
    /// adapter or denoiser [default: adapter]
    #[arg(long)]
    pub component: Option<String>,
    /// [default: sketch]
    #[arg(long)]
    pub kind: Option<String>,
    /// [default: base]
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    /// Manifest file or the run directory holding it
    pub manifest: PathBuf,
    /// Keep the replayed outputs here instead of a temporary directory
    #[arg(long, value_name = "DIR")]
    pub into: Option<PathBuf>,
}

impl Command {
    /// Default output directory name.
    pub fn name(&self) -> &'static str {
        match self {
            Command::Dataset(DatasetCmd::Gen(_)) => "dataset",
            Command::Train(TrainCmd::Base(_)) => "train-base",
            Command::Train(TrainCmd::Adapter(_)) => "train-adapter",
            Command::Sample(_) => "sample",
            Command::Ablate(AblateCmd::Stages(_)) => "ablate-stages",
            Command::Ablate(AblateCmd::Injection(_)) => "ablate-injection",
            Command::Ablate(AblateCmd::Generalization(_)) => "ablate-generalization",
            Command::Metrics(_) => "metrics",
            Command::CountParams(_) => "count-params",
            Command::Replay(_) => "replay",
        }
    }
}
