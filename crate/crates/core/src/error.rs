use std::path::PathBuf;

use diffcore::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum MvpsError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T, E = MvpsError> = std::result::Result<T, E>;

pub(crate) fn config(msg: impl Into<String>) -> MvpsError {
    MvpsError::Config(msg.into())
}

pub(crate) fn format_err(what: &'static str, detail: impl Into<String>) -> MvpsError {
    MvpsError::Format {
        what,
        detail: detail.into(),
    }
}

/// Attaches a path to an I/O error.
pub(crate) trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|source| MvpsError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
