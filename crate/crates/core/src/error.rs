use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("series for unit {unit} has zero dispersion")]
    ZeroDispersion { unit: usize },

    #[error("cannot aggregate an empty group: {0}")]
    EmptyGroup(String),

    #[error("invalid chronological split: {0}")]
    BadSplit(String),

    #[error("design matrix is rank deficient (condition number of X'X {condition:.3e})")]
    RankDeficient { condition: f64 },

    #[error("invalid rank {rank} for a {rows}x{cols} matrix")]
    BadRank { rank: usize, rows: usize, cols: usize },

    #[error("correlation {rho} does not give a positive semidefinite matrix of dimension {dim}")]
    NotPsd { rho: f64, dim: usize },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("missing features: {0}")]
    MissingFeatures(String),

    #[error("invalid scale: {0}")]
    BadScale(String),

    #[error("unknown group {0}")]
    UnknownGroup(usize),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid noise scales: {0}")]
    BadSigma(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical routines themselves, as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::RankDeficient { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
