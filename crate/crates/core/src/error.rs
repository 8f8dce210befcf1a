use std::io;

use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation matrix is not orthonormal (max deviation {0:.3e})")]
    NonOrthonormalInput(f64),

    #[error("degenerate view: {0}")]
    DegenerateView(String),

    #[error("gave up after {0} consecutive degenerate renders")]
    RejectionExhausted(usize),

    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersionMismatch { found: u16, expected: u16 },

    #[error("checksum mismatch or truncated file")]
    ChecksumMismatch,

    #[error("malformed file: {0}")]
    Format(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("length mismatch: expected {expected}, got {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("gradient requested through non-differentiable op `{0}`")]
    UnsupportedOp(&'static str),

    #[error("training diverged at {0}")]
    DivergenceDetected(String),

    #[error("validation set is empty")]
    EmptyValidation,

    #[error("bundle is incompatible with policy: {0}")]
    IncompatibleBundle(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
