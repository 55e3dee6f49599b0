use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod failure;
mod report;

use failure::Failure;

/// Vehicle speed estimation from bounding-box tracks.
#[derive(Debug, Parser)]
#[command(name = "trackspeed", version)]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset (JSON lines).
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on labeled tracks and write report CSVs.
    Eval(EvalArgs),
    /// Print one speed estimate per track.
    Predict(PredictArgs),
    /// Merge summary CSVs into one model x dataset table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Dataset config (JSON). Missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model config (JSON). Required unless --variant is given.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Train config (JSON). Missing fields take their defaults.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Checkpoint path to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the model config's variant: rnn, lstm, gru or transformer.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle_predictions")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for summary.csv and scatter_<model>.csv; created if absent.
    #[arg(long)]
    pub report_dir: PathBuf,
    /// Model name in the report. Defaults to the checkpoint's variant.
    #[arg(long)]
    pub name: Option<String>,
    /// Dataset name in the report. Defaults to the data file's stem.
    #[arg(long)]
    pub dataset_name: Option<String>,
    /// JSON object of track id to predicted speed, used instead of a model.
    /// Tracks missing from it are answered with their own label.
    #[arg(long, hide = true)]
    pub oracle_predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Summary CSVs written by `eval`.
    #[arg(long, required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Merged CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Failure::CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Report(a) => report::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
