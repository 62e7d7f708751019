use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "spap", version, about = "Spatial pyramid attentive pooling for GANs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an unconditional GAN on procedural toy images.
    Train(TrainArgs),
    /// Train a CycleGAN between two paired toy domains.
    TrainCyclegan(CycleArgs),
    /// Report output shapes, parameter counts and receptive fields of an architecture.
    Analyze(AnalyzeArgs),
    /// Compare two directories of PGM/PPM images.
    Metrics(MetricsArgs),
    /// Write the attention maps of every SPAP fusion step as PGM images.
    DumpAttention(AttentionArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` training configuration; missing keys take desk-scale defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Generator architecture: a file or a built-in preset name.
    #[arg(long, default_value = "desk_gen")]
    pub gen: String,
    /// Discriminator architecture: a file or a built-in preset name.
    #[arg(long, default_value = "desk_disc")]
    pub disc: String,
    /// Directory for metrics.csv and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Root seed; overrides the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of steps; overrides the configuration.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CycleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Translator architecture used for both directions.
    #[arg(long, default_value = "desk_cyc_gen")]
    pub gen: String,
    /// Discriminator architecture used for both domains.
    #[arg(long, default_value = "desk_cyc_disc")]
    pub disc: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Architecture file or built-in preset name.
    #[arg(long)]
    pub arch: String,
    /// Receptive field table.
    #[arg(long)]
    pub rf: bool,
    /// Parameter counts per layer.
    #[arg(long)]
    pub params: bool,
    /// Output shape of every layer.
    #[arg(long)]
    pub shapes: bool,
    /// One JSON document instead of tables.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[command(subcommand)]
    pub metric: Metric,
}

#[derive(Debug, Subcommand)]
pub enum Metric {
    /// Fréchet distance between embedded feature statistics of two image sets.
    Fid(FidArgs),
    /// PSNR and SSIM between same-named images of two directories.
    PsnrSsim(PairArgs),
}

#[derive(Debug, Args)]
pub struct FidArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Seed of the random embedding.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    /// Generator architecture: a file or a built-in preset name.
    #[arg(long)]
    pub arch: String,
    /// Checkpoint to load; without it the freshly initialized network is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Network prefix inside the checkpoint (`gen` for GAN runs, `g` or `f` for CycleGAN runs).
    #[arg(long, default_value = "gen")]
    pub prefix: String,
    /// Directory of input images (translators); latents are sampled otherwise.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Seed for latent samples and for initialization without a checkpoint.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of latent samples.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
}
