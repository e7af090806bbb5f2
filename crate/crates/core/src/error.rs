use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("backward requires a 1x1 loss, got {0:?}")]
    NonScalarLoss((usize, usize)),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("degenerate representation: row {0} has zero norm")]
    DegenerateRepresentation(usize),

    #[error("non-finite {what}: {detail}")]
    NonFinite { what: &'static str, detail: String },

    #[error("gradient check failed: {0}")]
    GradientCheck(String),

    #[error("vocabulary hash mismatch: checkpoint {expected}, data {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("invalid file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error buckets, used by the CLI to select an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    MissingFile,
    VocabMismatch,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Data(_) | Error::EmptyDataset | Error::Format { .. } => ErrorKind::Data,
            Error::Shape { .. }
            | Error::NonScalarLoss(_)
            | Error::DegenerateRepresentation(_)
            | Error::NonFinite { .. }
            | Error::GradientCheck(_) => ErrorKind::Numeric,
            Error::VocabMismatch { .. } => ErrorKind::VocabMismatch,
            Error::MissingFile(_) => ErrorKind::MissingFile,
            Error::Io { .. } => ErrorKind::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}
