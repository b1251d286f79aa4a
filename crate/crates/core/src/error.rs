use std::fmt;
use std::path::{Path, PathBuf};

/// Errors raised anywhere in the runtime.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A value violates a documented precondition or invariant.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A serialized artifact could not be decoded.
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: std::io::Error },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl fmt::Display) -> Self {
        Error::Shape { op, detail: detail.to_string() }
    }

    pub(crate) fn invalid(detail: impl fmt::Display) -> Self {
        Error::InvalidArgument(detail.to_string())
    }

    pub(crate) fn format(what: &'static str, detail: impl fmt::Display) -> Self {
        Error::Format { what, detail: detail.to_string() }
    }

    /// True for failures caused by the filesystem rather than by the inputs' content.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) | Error::File { .. } => true,
            Error::Csv(e) => matches!(e.kind(), csv::ErrorKind::Io(_)),
            _ => false,
        }
    }
}

/// Attaches the offending path to filesystem errors.
pub(crate) trait AtPath<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> AtPath<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| Error::File { path: path.to_path_buf(), source })
    }
}
