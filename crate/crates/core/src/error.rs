use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected} elements, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("all dimensions must be at least 1")]
    EmptyShape,

    #[error("rows have differing lengths")]
    RaggedRows,

    #[error("dimension mismatch on {axis} axis: {left} vs {right}")]
    DimensionMismatch {
        axis: &'static str,
        left: usize,
        right: usize,
    },

    #[error("operation requires a contiguous tensor")]
    NonContiguous,

    #[error("layer is {actual} but {expected} was requested")]
    VariantMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error(
        "n_dyad={n_dyad} does not divide {f_out}x{f_in}; zero-pad to {padded_out}x{padded_in}"
    )]
    Divisibility {
        f_out: usize,
        f_in: usize,
        n_dyad: usize,
        padded_out: usize,
        padded_in: usize,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("checkpoint version {found} is not supported by this reader (version {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("{path} is truncated: needed {needed} bytes, have {available}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        available: usize,
    },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
