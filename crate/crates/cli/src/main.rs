//! `mmgr`: train, evaluate and benchmark graph models for multimodal source
//! retrieval.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use args::Cli;

/// Exit status for malformed invocations and bad input files.
const EXIT_INPUT: u8 = 2;
/// Exit status for failures during computation.
const EXIT_RUNTIME: u8 = 3;

/// A failure reported as one JSON line on stderr.
#[derive(Debug)]
pub struct Failure {
    code: String,
    message: String,
    exit: u8,
}

impl Failure {
    pub fn input(code: &str, message: impl Into<String>) -> Self {
        Failure {
            code: code.to_string(),
            message: message.into(),
            exit: EXIT_INPUT,
        }
    }
}

impl From<mmgr_core::Error> for Failure {
    fn from(e: mmgr_core::Error) -> Self {
        Failure {
            code: e.code().to_string(),
            message: e.to_string(),
            exit: if e.is_input_error() { EXIT_INPUT } else { EXIT_RUNTIME },
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        mmgr_core::Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        mmgr_core::Error::from(e).into()
    }
}

fn report(f: &Failure) -> ExitCode {
    eprintln!("{}", json!({"code": f.code, "message": f.message}));
    ExitCode::from(f.exit)
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("MMGR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Failure::input("usage", format!("MMGR_THREADS must be a non-negative integer, got `{raw}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::input("usage", format!("cannot size the worker pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("invalid arguments");
            return report(&Failure::input("usage", first.trim_start_matches("error: ")));
        }
    };
    match configure_threads().and_then(|()| commands::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&f),
    }
}
