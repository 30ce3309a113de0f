//! `fgsb` command line: phantom data, training, synthesis, evaluation,
//! ablation sweeps.

mod commands;
mod plot;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "fgsb", version, about = "Guided bridge translation for paired 2D slice datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired phantom dataset.
    MakePhantom(commands::MakePhantomArgs),
    /// Train a model from a TOML run config.
    Train(commands::TrainArgs),
    /// Translate source slices with a trained checkpoint.
    Synthesize(commands::SynthesizeArgs),
    /// Score predicted slices against references.
    Evaluate(commands::EvaluateArgs),
    /// Train the standard ablation variants side by side.
    Ablate(commands::AblateArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::MakePhantom(args) => commands::make_phantom(args),
        Command::Train(args) => commands::train(args),
        Command::Synthesize(args) => commands::synthesize(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Ablate(args) => commands::ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
