use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("parameter `{0}` is frozen and cannot be updated")]
    FrozenParam(String),

    #[error("transform is singular (|det| = {0:e})")]
    Singular(f64),

    #[error("need at least 4 correspondences, got {0}")]
    TooFewMatches(usize),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("no mutual matches between feature maps")]
    NoMatches,

    #[error("{what}: measured {measured:.4}, required {required:.4}")]
    Gate { what: String, measured: f64, required: f64 },

    #[error("non-finite loss at iteration {iteration}: {dump}")]
    NonFinite { iteration: usize, dump: String },

    #[error("malformed weight file {path}: {reason}")]
    WeightFormat { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
