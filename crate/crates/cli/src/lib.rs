//! Command-line front end for `ovdet3d`.
//!
//! Exit codes: 0 success, 2 bad input (missing or malformed files, scene id
//! mismatches), 3 bad configuration (invalid flag values, vocabulary and
//! provider disagreeing), 4 provider failure. Data goes to stdout or the
//! `--out` path; diagnostics go to stderr.

mod args;
mod commands;
mod metadata;

use std::ffi::OsString;

use clap::Parser;

pub use args::{Cli, Command, RunConfig};
pub use metadata::{metadata_path, sha256_file};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_PROVIDER: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("provider error: {0}")]
    Provider(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => EXIT_INPUT,
            Self::Config(_) => EXIT_CONFIG,
            Self::Provider(_) => EXIT_PROVIDER,
        }
    }
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match commands::execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ovdet3d: {e}");
            e.exit_code()
        }
    }
}
