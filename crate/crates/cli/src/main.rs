use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "atd", version, about = "Train and evaluate the bimodal series/image fusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (series CSV, image tensors, manifest).
    Synth { config: PathBuf },
    /// Train, then write parameters and a metrics report.
    Train { config: PathBuf },
    /// Evaluate saved parameters without modifying them.
    Eval { config: PathBuf, params: PathBuf },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale the named op's backward rule by 1.5 (harness negative control).
        #[arg(long, hide = true)]
        corrupt_backward: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { config } => commands::cmd_synth(config).map(drop),
        Command::Train { config } => commands::cmd_train(config).map(drop),
        Command::Eval { config, params } => commands::cmd_eval(config, params).map(drop),
        Command::Gradcheck { seed, corrupt_backward } => {
            commands::cmd_gradcheck(*seed, corrupt_backward.as_deref()).map(drop)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
