//! `spap`: train SPAP-augmented GANs and CycleGANs on toy data, analyze
//! architecture files, compute image metrics and export attention maps.

mod analyze;
mod args;
mod attention;
mod error;
mod load;
mod metrics;
mod train;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use error::CliError;

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => train::gan(a),
        Command::TrainCyclegan(a) => train::cyclegan(a),
        Command::Analyze(a) => analyze::run(a),
        Command::Metrics(a) => metrics::run(a),
        Command::DumpAttention(a) => attention::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
