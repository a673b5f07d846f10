//! `otlab` command-line interface.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format problem, 3 numerical
//! divergence.

mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use commands::Command;

#[derive(Debug, Parser)]
#[command(name = "otlab", version, about = "Latent-regularized classifiers, attacks and intrinsic dimension")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<otlab::Error>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
