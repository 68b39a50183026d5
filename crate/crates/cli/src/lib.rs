//! The `bench` command line.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;
use tracing::level_filters::LevelFilter;

use crate::args::{Cli, Command};
use crate::error::{CliError, Result};

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => LevelFilter::ERROR,
        (false, 0) => LevelFilter::WARN,
        (false, 1) => LevelFilter::INFO,
        (false, 2) => LevelFilter::DEBUG,
        _ => LevelFilter::TRACE,
    };
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .try_init();
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Build(a) => commands::build(a),
        Command::Infer(a) => commands::infer(a),
        Command::Parse(a) => commands::parse(a),
        Command::Eval(a) => commands::eval(a),
        Command::Report(a) => commands::report(a),
        Command::Manifest(a) => commands::manifest(a),
    }
}

/// Run with the given arguments and return the process exit code. Errors are
/// reported on stderr as a single JSON line.
pub fn run(argv: Vec<OsString>) -> i32 {
    let result = config::expand(argv).and_then(|argv| {
        Cli::try_parse_from(argv).map_err(|e| match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                let _ = e.print();
                CliError::Usage(String::new())
            }
            _ => CliError::Usage(e.render().to_string().trim_end().to_string()),
        })
    });
    let cli = match result {
        Ok(cli) => cli,
        Err(CliError::Usage(msg)) if msg.is_empty() => return 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            return e.exit_code();
        }
    };
    init_logging(cli.verbose, cli.quiet);
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
