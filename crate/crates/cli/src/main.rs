use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "asrl", version, about = "Adversarial 4x super-resolution: train, evaluate, plot")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator/discriminator pair from a run file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint's generator against a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image directory or `synth:<kind>[:count]`.
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a trained 1-D critic's estimate with the exact W1 distance.
    Toyw1 {
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot smoothed training curves from a log.csv.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, seed } => commands::train(&config, &out, seed),
        Command::Eval { checkpoint, data, out } => commands::eval(&checkpoint, &data, &out),
        Command::Toyw1 { out } => commands::toyw1(&out),
        Command::Plot { log, out } => commands::plot(&log, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                asrl::Error::Diverged { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
