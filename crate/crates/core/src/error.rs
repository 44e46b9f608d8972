use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the sampling library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("schedule violation: {0}")]
    ScheduleViolation(String),

    /// A particle left the finite region guarded by [`crate::DIVERGENCE_BOUND`].
    #[error("numerical divergence at segment {segment}, iteration {reverse_iter}, chain {chain}, inner step {inner_step}")]
    Divergence {
        segment: i64,
        reverse_iter: usize,
        chain: usize,
        inner_step: usize,
    },

    /// An outer-loop particle left the guarded region.
    #[error("numerical divergence of particle {particle} at outer step {step}")]
    ParticleDivergence { particle: usize, step: usize },

    #[error("degenerate kernel bandwidth {0}")]
    DegenerateBandwidth(f64),

    #[error("config error in {path}: {message}")]
    Config {
        path: String,
        line: Option<usize>,
        column: Option<usize>,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Builds a config error from a serde_json failure, keeping its position.
    pub fn config_from_json(path: impl Into<String>, err: &serde_json::Error) -> Self {
        Error::Config {
            path: path.into(),
            line: Some(err.line()),
            column: Some(err.column()),
            message: err.to_string(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            line: None,
            column: None,
            message: message.into(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
