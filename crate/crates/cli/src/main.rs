//! `mpcc`: data generation, training, evaluation, scanning, benchmarking and
//! embedding export for domain-adaptive point cloud completion.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mpcc_core::metrics::Metric;
use mpcc_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "mpcc",
    version,
    about = "Domain-adaptive point cloud completion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic source / target datasets.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled or unlabeled split.
    Eval(EvalArgs),
    /// Serialize two clouds in a shared grid and write their patches.
    Scan(ScanArgs),
    /// Parameter count, analytic FLOPs and wall-time of one forward.
    Bench(BenchArgs),
    /// Export pooled encoder features of both domains.
    ExportEmbed(ExportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub per_category: usize,
    #[arg(long, default_value_t = 2048)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Target-domain Gaussian noise sigma.
    #[arg(long)]
    pub target_noise: Option<f64>,
    /// Target-domain dropout ratio.
    #[arg(long)]
    pub target_dropout: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat `key = value` config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub source_dir: PathBuf,
    #[arg(long)]
    pub target_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Validate the config and inputs, then exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "cd")]
    pub metric: Metric,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ScanArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub input2: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub g: usize,
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    #[arg(long, default_value_t = mpcc_core::zorder::DEFAULT_BITS)]
    pub bits: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Checkpoint whose sibling `config.txt` defines the model.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Config used when no checkpoint is given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 2048)]
    pub points: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    /// Directory for `bench.csv` and `timing.csv`.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub source_dir: PathBuf,
    #[arg(long)]
    pub target_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// 0 ok, 2 config, 3 I/O, 4 divergence, 1 anything else.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Version(_) => 2,
        Error::Io { .. } | Error::Parse { .. } => 3,
        Error::Divergence(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Scan(a) => commands::scan(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::ExportEmbed(a) => commands::export_embed(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
