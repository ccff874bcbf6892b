use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the pipeline.
///
/// The variants are grouped by [`ErrorClass`] so front ends can map them onto
/// stable exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("ingest error for clip '{clip_id}': {detail}")]
    Ingest { clip_id: String, detail: String },
    #[error("invalid ROI box: {0}")]
    InvalidRoi(String),
    #[error("alignment error for clip '{clip_id}': expected {expected} rows, found {found}")]
    Alignment {
        clip_id: String,
        expected: usize,
        found: usize,
    },
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },
    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("metric {0} is undefined for single-class input")]
    UndefinedMetric(&'static str),
    #[error("training error: {0}")]
    Training(String),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("config error: {0}")]
    Config(String),
}

/// Coarse classification used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Usage,
            Error::Ingest { .. }
            | Error::InvalidRoi(_)
            | Error::Alignment { .. } | Error::Format { .. } | Error::Io { .. } => {
                ErrorClass::Data
            }
            Error::Fold { source, .. } => source.class(),
            Error::Dimension { .. }
            | Error::Numeric { .. }
            | Error::Contract(_)
            | Error::UndefinedMetric(_)
            | Error::Training(_) => ErrorClass::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
