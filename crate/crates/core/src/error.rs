use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?} but got {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("time axis collapsed at {layer}: {time} steps remaining, needs at least {needed}")]
    TimeCollapsed {
        layer: String,
        time: usize,
        needed: usize,
    },

    #[error("variable does not belong to this tape")]
    NotOnTape,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("timestamps not strictly increasing at sample index {index}")]
    NonMonotone { index: usize },

    #[error("dimension mismatch: expected {expected}, found {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("duplicate window id {0:?}")]
    DuplicateId(String),

    #[error("missing {what} for {} id(s): {}", ids.len(), ids.join(", "))]
    MissingIds { what: String, ids: Vec<String> },

    #[error("unknown class {0:?}")]
    UnknownClass(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidArgument { .. } => "invalid_argument",
            Error::TimeCollapsed { .. } => "time_collapsed",
            Error::NotOnTape => "not_on_tape",
            Error::NonFinite { .. } => "non_finite",
            Error::Parse { .. } => "parse",
            Error::NonMonotone { .. } => "non_monotone",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::DuplicateId(_) => "duplicate_id",
            Error::MissingIds { .. } => "missing_ids",
            Error::UnknownClass(_) => "unknown_class",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// Numerical failures (as opposed to bad input) abort a run with their own exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
