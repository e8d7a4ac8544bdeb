//! Command errors and their exit codes.

use std::fmt;

/// 1: the invocation or its inputs are wrong. 2: a gate or assertion failed.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Gate(String),
    Core(matres_core::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Gate(_) => 2,
            CliError::Core(matres_core::Error::Gate { .. } | matres_core::Error::NonFinite { .. }) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Gate(m) => write!(f, "gate failed: {m}"),
            CliError::Core(matres_core::Error::Gate { what, measured, required }) => write!(
                f,
                "gate failed: {what}: measured {measured:.4}, required {required:.4} (margin {:+.4})",
                measured - required
            ),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<matres_core::Error> for CliError {
    fn from(e: matres_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;
