//! Command implementations behind the `ssept` binary.

pub mod commands;
pub mod config;

use std::fmt;

pub use config::RunConfig;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self {
            CliError::Config(_) => "config error",
            CliError::Data(_) => "data error",
            CliError::Numeric(_) => "numeric failure",
        };
        write!(f, "{kind}: {}", self.message())
    }
}

impl std::error::Error for CliError {}

impl From<ssept::Error> for CliError {
    fn from(e: ssept::Error) -> Self {
        use ssept::Error as E;
        match e {
            E::Contract(_) => CliError::Config(e.to_string()),
            E::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
