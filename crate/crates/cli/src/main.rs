//! `softsamp`: curation, RoI weighting, evaluation and simulation pipelines.

mod commands;
mod output;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::*;
use output::CliResult;

#[derive(Debug, Parser)]
#[command(
    name = "softsamp",
    version,
    about = "Soft sampling under missing annotations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Drop a fraction of annotations per class.
    Curate(CurateArgs),
    /// Label and weight every proposal under a training strategy.
    Weigh(WeighArgs),
    /// Per-class AP and mAP of detections against a dataset.
    Eval(EvalArgs),
    /// Probability that a proposal hits a dropped box, by overlap with kept boxes.
    Hist(HistArgs),
    /// Compare strategies across drop rates on synthetic scenes.
    Simulate(SimulateArgs),
    /// Convert a directory of VOC XML annotations to dataset JSON.
    ConvertVoc(ConvertVocArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Curate(a) => cmd_curate(a),
        Command::Weigh(a) => cmd_weigh(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Hist(a) => cmd_hist(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::ConvertVoc(a) => cmd_convert_voc(a),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            std::process::exit(code);
        }
    };
    if let Err(f) = run(cli) {
        eprintln!("softsamp: {f}");
        std::process::exit(f.exit_code());
    }
}
