use std::process::ExitCode;

use clap::Parser;

use sepsis_mbrl_cli::error::exit_code;
use sepsis_mbrl_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(_) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
