use thiserror::Error;

/// Errors produced by the inversion/editing engine.
///
/// Variants split into two families: input problems (bad files, broken
/// invariants, mismatched shapes) and internal failures. The CLI maps the
/// first family to exit code 2 and the second to exit code 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("stack does not belong to this source grid (expected checksum {expected}, got {actual})")]
    ChecksumMismatch { expected: String, actual: String },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("case {case}: {source}")]
    Case {
        case: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn dims(expected: impl std::fmt::Display, actual: impl std::fmt::Display) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for errors caused by the caller's input rather than by the engine.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Internal(_) => false,
            Error::Io { .. } => true,
            Error::Case { source, .. } => source.is_input_error(),
            _ => true,
        }
    }

    /// Attach a benchmark case id.
    pub fn in_case(self, case: impl Into<String>) -> Self {
        Error::Case {
            case: case.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Map a serde_json error to a parse error, recovering the offending field
/// name from the message where serde reports one.
pub(crate) fn from_json(err: serde_json::Error) -> Error {
    let message = err.to_string();
    let field = message
        .split('`')
        .nth(1)
        .map(str::to_owned)
        .unwrap_or_else(|| format!("line {} column {}", err.line(), err.column()));
    Error::Parse { field, message }
}
