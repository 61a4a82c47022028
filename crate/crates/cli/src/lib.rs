//! Configuration, commands and report output behind the `ffsqueeze` binary.

pub mod commands;
pub mod config;
pub mod report;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("{0}")]
    Model(#[from] ffsqueeze::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit status: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Model(_) | CliError::Io(_) => 3,
        }
    }
}

/// Exit status when every check passed or at least one failed.
pub const EXIT_PASS: i32 = 0;
pub const EXIT_TOLERANCE: i32 = 1;
