//! Library side of the `heraldkey` command-line tool.

pub mod commands;
pub mod config;
pub mod record;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{failed} of {total} sweep points failed")]
    PartialSweep { failed: usize, total: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Io(_) => 3,
            CliError::PartialSweep { .. } => 4,
        }
    }
}

impl From<heraldkey_core::Error> for CliError {
    fn from(e: heraldkey_core::Error) -> Self {
        match e {
            heraldkey_core::Error::Domain(msg) => CliError::Config(msg),
            other => CliError::Numerical(other.to_string()),
        }
    }
}
