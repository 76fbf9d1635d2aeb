use thiserror::Error;

use crate::poly::PolyError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("{field}: {source}")]
    Field { field: String, source: PolyError },
    #[error("malformed document: {0}")]
    Malformed(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("delta must be non-negative, got {0}")]
    NegativeDelta(f64),
    #[error("set cannot be sampled: {accepted} of {attempts} candidates accepted")]
    Unsampleable { accepted: usize, attempts: usize },
    #[error("no bounding interval for variable `{0}`")]
    MissingBounds(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("no solution to extract: solver status {0}")]
    NoSolution(String),
    #[error(transparent)]
    Sdp(#[from] opacert_sdp::SdpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
