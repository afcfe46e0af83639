//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the toolkit.
///
/// Variants are grouped by failure class so the CLI can map them onto
/// process exit codes without string matching: configuration problems,
/// dataset problems, container format problems, and compute failures.
#[derive(Debug)]
pub enum Error {
    /// Tensor or layer shape mismatch, sizes included in the message.
    Shape(String),
    /// Invalid configuration or argument combination.
    Config(String),
    /// Dataset missing, truncated, or inconsistent.
    Data(String),
    /// Checkpoint or zoo layout violation.
    Format(String),
    /// Underlying file IO failure.
    Io(std::io::Error),
    /// Training produced a non-finite loss.
    Divergence { model: usize, epoch: usize },
    /// Statistic undefined for the given input (for example zero variance).
    Stats(String),
    /// Any other compute-stage failure.
    Compute(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::Config(m) => write!(f, "invalid config: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Divergence { model, epoch } => {
                write!(f, "training diverged: non-finite loss for model {model} at epoch {epoch}")
            }
            Error::Stats(m) => write!(f, "undefined statistic: {m}"),
            Error::Compute(m) => write!(f, "compute error: {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
