use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the fitting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value outside its domain: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An MFVB sweep lowered the ELBO, which exact coordinate ascent cannot do.
    #[error("ELBO decreased from {previous} to {current} at iteration {iteration}")]
    ElboDecrease {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("every model-choice candidate failed: {}", .0.join("; "))]
    AllCandidatesFailed(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
