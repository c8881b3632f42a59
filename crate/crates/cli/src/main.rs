use std::process::ExitCode;

use clap::Parser;

use drnets_cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("drnets: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
