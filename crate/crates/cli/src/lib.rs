//! Command-line front end for the `pfcm` binary.
//!
//! Every invocation that gets as far as knowing its output directory
//! appends one JSON line to `<out>/manifest.jsonl`, whether it succeeds or
//! not.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration or metadata mismatch,
//! 4 numeric failure, 5 I/O.

pub mod args;
mod commands;
mod manifest;

use std::ffi::OsString;
use std::fmt;

use clap::Parser;

pub use manifest::{hash_file, RunManifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<pfcm_core::Error> for Failure {
    fn from(e: pfcm_core::Error) -> Self {
        use pfcm_core::Error as E;
        let code = match &e {
            E::InvalidArgument(_) | E::ShapeMismatch { .. } | E::MetadataMismatch(_) => EXIT_CONFIG,
            E::NonFinite(_) => EXIT_NUMERIC,
            E::Format(_) | E::Io(_) | E::Json(_) => EXIT_IO,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: EXIT_IO,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure {
            code: EXIT_IO,
            message: e.to_string(),
        }
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match args::Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::dispatch(cli.command, &argv) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}
