mod commands;
mod record;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

/// Block-wise augmentation and image-aware contrastive pretraining.
#[derive(Parser)]
#[command(name = "blockssl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-label corpus.
    GenData(GenDataArgs),
    /// Self-supervised pretraining.
    Pretrain(PretrainArgs),
    /// Train and score a linear probe on a frozen encoder.
    LinearEval(LinearEvalArgs),
    /// Write augmented views as contact sheets with provenance.
    DumpViews(DumpViewsArgs),
    /// Plot training curves of one or more runs.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1024)]
    pub num: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 4)]
    pub max_objects: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct PretrainArgs {
    /// Dataset directory or manifest path.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// `bam` or `global`.
    #[arg(long, default_value = "bam")]
    pub aug: String,
    /// `sim`, `sim+ia` or `sim+sup`.
    #[arg(long, default_value = "sim+ia")]
    pub loss: String,
    #[arg(long, default_value_t = 0.2)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.2)]
    pub zoom_lo: f64,
    #[arg(long, default_value_t = 4.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    /// `sum` or `mean` over anchors in the contrastive term.
    #[arg(long, default_value = "sum")]
    pub ia_reduction: String,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Base learning rate; defaults to 0.05 · effective batch / 256.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub view_size: usize,
    #[arg(long, default_value = "32,64,128,256")]
    pub widths: String,
    #[arg(long, default_value_t = 128)]
    pub embed_dim: usize,
    /// Pooling used by the encoder during pretraining.
    #[arg(long, default_value = "gap")]
    pub pool: String,
    /// Stop after the first epoch whose mean L_sim is at or below this.
    #[arg(long, allow_hyphen_values = true)]
    pub stop_at_l_sim: Option<f64>,
    /// Parameter precision, `f32` or `f64`.
    #[arg(long, default_value = "f32")]
    pub dtype: String,
    /// Continue from the checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct LinearEvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Probe a freshly initialised encoder instead of trained weights.
    #[arg(long)]
    pub random_init: bool,
    /// Training data; split 80/20 unless `--eval-data` is given.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// `gap`, `gmp`, `gamp-mean` or `gamp-diff`.
    #[arg(long, default_value = "gap")]
    pub pool: String,
    #[arg(long, default_value_t = 0.5)]
    pub theta: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Base learning rate; defaults to 10 · batch / 256.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Encoder shape for `--random-init` without a checkpoint.
    #[arg(long, default_value_t = 64)]
    pub view_size: usize,
    #[arg(long, default_value = "32,64,128,256")]
    pub widths: String,
    #[arg(long, default_value_t = 128)]
    pub embed_dim: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct DumpViewsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "bam")]
    pub aug: String,
    /// Number of source images, taken in manifest order.
    #[arg(long, default_value_t = 4)]
    pub images: usize,
    #[arg(long, default_value_t = 0.2)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.2)]
    pub zoom_lo: f64,
    #[arg(long, default_value_t = 64)]
    pub view_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training step whose augmentation keys are used.
    #[arg(long, default_value_t = 0)]
    pub step: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Run directories holding `log.csv`.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Extra directories holding `runs.csv` metric rows.
    #[arg(long, num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// `BLOCKSSL_THREADS`, when set, must be a positive integer.
fn thread_cap() -> blockssl::Result<Option<usize>> {
    match std::env::var("BLOCKSSL_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(blockssl::Error::Config(format!(
                "BLOCKSSL_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

fn run(cli: Cli) -> blockssl::Result<()> {
    if let Some(n) = thread_cap()? {
        // every stage runs on the calling thread, so any cap is already met
        info!("worker cap {n}; computation is single-threaded");
    }
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::LinearEval(a) => commands::linear_eval(&a),
        Command::DumpViews(a) => commands::dump_views(&a),
        Command::Report(a) => commands::report(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
