//! Library half of the `vade` command-line tool.
//!
//! Each subcommand is a function in [`commands`] returning a [`CliError`]
//! whose [`CliError::exit_code`] is the process status: 2 for configuration,
//! 3 for data, 4 for divergence, 5 for shape and 6 for argument-range errors.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;

pub use config::RunConfig;
pub use error::CliError;

/// Worker count for parallel restarts from `VADE_THREADS` (default 1).
pub fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var("VADE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("VADE_THREADS must be a positive integer, found {v:?}"))),
        },
    }
}
