//! `fia`: dataset generation, training, try-on inference, evaluation and
//! ablation sweeps.
//!
//! Exit codes: 0 on success, 1 on internal failure, 2 on user error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fia_vton::FiaError;

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::User(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<FiaError> for CliError {
    fn from(e: FiaError) -> Self {
        if e.is_user_error() {
            CliError::User(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(format!("json: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "fia", version, about = "Flow-infused attention virtual try-on")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic paired dataset.
    Generate(GenerateArgs),
    /// Pretrain the codec and flow guider, then train the denoiser.
    Train(TrainArgs),
    /// Run inference for one person and garment.
    Tryon(TryonArgs),
    /// Sample a split and write a metric report per interpolation.
    Evaluate(EvaluateArgs),
    /// Train and evaluate several variants under shared seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Number of training samples.
    #[arg(long)]
    pub n: usize,
    /// Additional held-out samples written to the `eval` split.
    #[arg(long, default_value_t = 0)]
    pub eval_n: usize,
    /// Image size as HEIGHTxWIDTH.
    #[arg(long, default_value = "64x48")]
    pub size: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON config: a `profile` field plus overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint; its config is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total joint training steps (overrides the config).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<String>,
    /// Autoencoder pretraining steps (ignored for the identity codec).
    #[arg(long, default_value_t = 2000)]
    pub codec_steps: usize,
    /// Flow estimator pretraining steps (learned flow source only).
    #[arg(long, default_value_t = 5000)]
    pub flow_steps: usize,
}

#[derive(Args, Debug)]
pub struct TryonArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Sample id providing the person, mask, pose and flow.
    #[arg(long)]
    pub person: String,
    /// Sample id providing the garment; defaults to the person's own.
    #[arg(long)]
    pub garment: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sampling steps; defaults to the config.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "eval")]
    pub split: String,
    /// paired or unpaired.
    #[arg(long, default_value = "paired")]
    pub setting: String,
    /// bilinear, cubic or both.
    #[arg(long, default_value = "bilinear")]
    pub interpolation: String,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value = "eval")]
    pub eval_split: String,
    /// Comma-separated variant names.
    #[arg(long, default_value = "fia,concat_input,plain_cross_attention,no_flow,no_spatial")]
    pub variants: String,
    /// Comma-separated seeds shared by every variant.
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub sampling_steps: Option<usize>,
    #[arg(long, default_value = "bilinear")]
    pub interpolation: String,
    #[arg(long)]
    pub eval_limit: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    pub codec_steps: usize,
    #[arg(long, default_value_t = 5000)]
    pub flow_steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Caps tensor-backend threads at `FIA_THREADS`. Training pins one thread
/// unless the variable is set.
fn configure_threads(command: &Command) -> usize {
    let requested = std::env::var("FIA_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    let threads = match (requested, command) {
        (Some(n), _) => n,
        (None, Command::Train(_)) => 1,
        (None, _) => fia_vton::parallel::worker_count(),
    };
    std::env::set_var("RAYON_NUM_THREADS", threads.to_string());
    threads
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = configure_threads(&cli.command);
    let args: Vec<String> = std::env::args().skip(1).collect();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Tryon(a) => commands::tryon(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Ablate(a) => commands::ablate(a),
    }
    .and_then(|run| commands::finish(run, args, threads));
    match result {
        Ok(path) => {
            log::info!("wrote {}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
