//! Command-line surface: run configuration, CSV ingestion, model files and
//! the `finemorphs` subcommands.
//!
//! Exit codes: 0 on success, 2 for invalid input (arguments, config, data,
//! files), 3 when training or prediction aborts numerically.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod model_file;

use std::ffi::OsString;

use clap::Parser;

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_VALIDATION
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match commands::Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    if let Err(e) = crate::init_thread_pool_from_env() {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    match commands::dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
