use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gdr_cli::commands::{self, EvaluateArgs, GenDataArgs, InspectArgs, TrainArgs, TranslateArgs};
use gdr_cli::CliError;

/// Neural machine translation with guided dynamic routing.
#[derive(Parser)]
#[command(name = "gdr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Translate sentences with a trained checkpoint.
    Translate(TranslateArgs),
    /// Score a checkpoint on a test set and write a JSON report.
    Evaluate(EvaluateArgs),
    /// Dump per-step routing masses for one sentence pair.
    InspectRouting(InspectArgs),
    /// Write a synthetic parallel corpus.
    GenData(GenDataArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::run_train(&a),
        Command::Translate(a) => commands::run_translate(&a),
        Command::Evaluate(a) => commands::run_evaluate(&a).map(drop),
        Command::InspectRouting(a) => commands::run_inspect(&a),
        Command::GenData(a) => commands::run_gen_data(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
