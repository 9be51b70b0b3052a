//! `gridfree` command-line interface.

mod args;
mod commands;

use std::io::ErrorKind;
use std::process::ExitCode;

use clap::Parser;
use gridfree::Error;

use args::Cli;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn set_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("GRIDFREE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("GRIDFREE_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Err(msg) = set_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let missing_input = matches!(&e, Error::Io { source, .. } if source.kind() == ErrorKind::NotFound);
            ExitCode::from(if e.is_usage_error() {
                EXIT_USAGE
            } else if e.is_data_error() || missing_input {
                EXIT_DATA
            } else {
                EXIT_RUNTIME
            })
        }
    }
}
