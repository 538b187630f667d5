use std::path::PathBuf;

use thiserror::Error;

use crate::model::AdmissibilityReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("size mismatch: expected {expected} values, got {got}")]
    SizeMismatch { expected: usize, got: usize },

    #[error("density must be positive, got {0}")]
    NonPositiveDensity(f64),

    #[error("vacuum: perturbation a = {a} reaches -rho_bar = {rho_bar}")]
    Vacuum { a: f64, rho_bar: f64 },

    #[error("inadmissible state: {0}")]
    Inadmissible(Box<AdmissibilityReport>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{context}: {source}")]
    Io {
        context: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into(),
            source,
        }
    }
}
