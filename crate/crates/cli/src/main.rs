//! `vecheart` command-line entry point.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "vecheart", version, about = "Multi-part implicit heart shapes on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset with 6:2:2 splits.
    GenData(GenDataArgs),
    /// Train stage I, stage II or the flow generator.
    Train(TrainArgs),
    /// Reconstruct phantoms from surfaces or slices and score them.
    Reconstruct(ReconstructArgs),
    /// Sample a 3D+t sequence from a trained flow.
    Generate(GenerateArgs),
    /// Print parameter checksums of a checkpoint.
    Checksum(ChecksumArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Phantom box edge, mm.
    #[arg(long, default_value_t = vecheart::phantom::DEFAULT_SCALE)]
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
pub enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Flow,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: Stage,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults: 1000 (stage 1), 500 (stage 2), 500 (flow).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stage-1 checkpoint (required for stage 2 and flow).
    #[arg(long)]
    pub ckpt_in: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// JSON file with `model`, `train` and `flow` sections; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Frames per training sequence (flow).
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
pub enum InputKind {
    Surface,
    Slices,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
pub enum ProtocolArg {
    SaxLax,
    SaxOnly,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = InputKind::Surface)]
    pub input: InputKind,
    /// Comma-separated part names to hide, e.g. `LA,RA`.
    #[arg(long)]
    pub mask: Option<String>,
    #[arg(long, default_value_t = 128)]
    pub res: usize,
    /// Dataset split to reconstruct: train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Reconstruct at most this many phantoms.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, value_enum, default_value_t = ProtocolArg::SaxLax)]
    pub protocol: ProtocolArg,
    /// In-plane slice displacement std, mm.
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt_flow: PathBuf,
    /// Decoder checkpoint; defaults to `decoder.vhck` next to the flow.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = vecheart::flowgen::DEFAULT_FRAMES)]
    pub frames: usize,
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub res: usize,
    #[arg(long, default_value_t = vecheart::phantom::DEFAULT_SCALE)]
    pub scale: f64,
}

#[derive(Args, Debug)]
pub struct ChecksumArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Restrict to parameter names with this prefix.
    #[arg(long)]
    pub prefix: Option<String>,
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("VECHEART_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("VECHEART_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(CliError::Usage("VECHEART_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.into()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Generate(a) => commands::generate(a),
        Command::Checksum(a) => commands::checksum(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
