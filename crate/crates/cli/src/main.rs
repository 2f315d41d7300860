//! `forcebench` command-line front-end.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
//! Failures print one JSON line `{"error": <kind>, "message": <text>}` to
//! stderr.

mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use commands::{Cli, CliError};

fn main() -> ExitCode {
    let args = match config::expand(std::env::args().collect()) {
        Ok(a) => a,
        Err(msg) => return fail(&CliError::Usage(msg)),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            return fail(&CliError::Usage(first.to_string()));
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    eprintln!("{line}");
    ExitCode::from(e.exit_code())
}
