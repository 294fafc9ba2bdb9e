use std::io;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing capture for parameter `{0}`")]
    MissingCapture(String),

    #[error("parameter `{param}` is shared in an unsupported way: {detail}")]
    UnsupportedSharing { param: String, detail: String },

    #[error("norm identity violated for sample {sample}: radicand {radicand}")]
    NegativeRadicand { sample: usize, radicand: f64 },

    #[error("privacy budget infeasible: {0}")]
    InfeasibleBudget(String),

    #[error("refusing oracle run: {bytes} bytes exceeds bound {bound}")]
    OracleTooLarge { bytes: usize, bound: usize },

    #[error("empty dataset after filtering")]
    EmptyDataset,

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
