//! Crate-wide error type with the exit-code categories the CLI reports.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad key, bad value, inconsistent parameters.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem or file-format failure (missing file, bad magic, ...).
    #[error("io error: {0}")]
    Io(String),

    /// Shape/dimension mismatch between volumes or masks.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Input outside an operation's mathematical domain (empty mask,
    /// zero variance, out-of-range timestep, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Numerical failure: non-finite values, singular systems.
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io_path(path: &Path, err: impl std::fmt::Display) -> Self {
        Error::Io(format!("{}: {err}", path.display()))
    }

    /// Coarse category used for CLI exit codes and messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Dim(_) | Error::Domain(_) | Error::Numeric(_) => "numeric",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) => 3,
            Error::Dim(_) | Error::Domain(_) | Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
