use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration for {op}: {detail}")]
    Config { op: &'static str, detail: String },

    #[error("degenerate statistics in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: empty input")]
    Empty { op: &'static str },

    #[error("backward requires a single-element output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DiffError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> DiffError {
    DiffError::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn config_err(op: &'static str, detail: impl Into<String>) -> DiffError {
    DiffError::Config {
        op,
        detail: detail.into(),
    }
}
