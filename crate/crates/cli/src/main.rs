mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "hide", version, about = "Learned image codec with dictionary-based context modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Compress a PPM/PGM image.
    Encode(EncodeArgs),
    /// Decompress a stream back to PPM/PGM.
    Decode(DecodeArgs),
    /// Dictionary utilization, heatmaps and entropy maps.
    Analyze(AnalyzeArgs),
    /// BD-rate of TEST against ANCHOR, in percent.
    Bdrate(BdrateArgs),
    /// Train and evaluate every variant across the λ set.
    Sweep(SweepArgs),
}

/// Model overrides shared by `train` and `sweep`.
#[derive(Args, Clone, Debug, Default)]
pub struct ModelOverrides {
    /// key=value config file (model and training keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training steps (overrides the config).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Directory of equally sized .ppm/.pgm training patches instead of the
    /// bundled procedural corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelOverrides,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Continue from this checkpoint (fine-tuning); its model config wins.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Original image; when given, the PSNR of the reconstruction is printed.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Images to analyze; the procedural evaluation set when omitted.
    pub images: Vec<PathBuf>,
    /// Output directory for reports, heatmaps and maps.
    #[arg(long)]
    pub out: PathBuf,
    /// Heatmaps are written for this many most-used entries per dictionary.
    #[arg(long, default_value_t = 4)]
    pub top_k: usize,
}

#[derive(Args)]
pub struct BdrateArgs {
    pub anchor: PathBuf,
    pub test: PathBuf,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelOverrides,
    /// Comma-separated variants.
    #[arg(long, default_value = "baseline,hd,cape,hide", value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Comma-separated λ values; the six values 0.0018 to 0.05 when omitted.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    /// Evaluation images; the procedural evaluation set when omitted.
    #[arg(long)]
    pub eval_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub eval_count: usize,
    /// Side of the procedural evaluation images; defaults to the training
    /// patch size, since the small models do not generalize to latent grids
    /// larger than the ones they were trained on.
    #[arg(long)]
    pub eval_size: Option<usize>,
    /// Parallel training runs; HIDE_DETERMINISTIC=1 forces 1.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory: one `<variant>.csv` plus checkpoints.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Encode(a) => commands::encode(a),
        Command::Decode(a) => commands::decode(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Bdrate(a) => commands::bdrate(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
