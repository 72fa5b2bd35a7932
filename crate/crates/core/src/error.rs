use thiserror::Error;

/// Errors produced while ingesting, validating or processing classifier outputs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input is empty")]
    EmptyInput,

    #[error("row {row}: expected {expected} fields, found {found}")]
    RaggedRow {
        row: u64,
        expected: usize,
        found: usize,
    },

    #[error("row {row}, column {column}: cannot parse {token:?} as a number")]
    BadNumber { row: u64, column: usize, token: String },

    #[error("row {row}, column {column}: value is not finite")]
    NonFinite { row: u64, column: usize },

    #[error("row {row}: label {label} out of range for {k} classes")]
    LabelRange { row: u64, label: i64, k: usize },

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: need {expected} bytes, have {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("{0} unexpected trailing bytes after payload")]
    TrailingBytes(u64),

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("class count mismatch: {left} vs {right}")]
    ClassMismatch { left: usize, right: usize },

    #[error("target coverage {target} exceeds top-{k} accuracy {max}")]
    Infeasible { target: f64, k: usize, max: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    /// Whether the failure comes from bad input rather than the environment.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io(_) => false,
            Error::Csv(e) => !e.is_io_error(),
            _ => true,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
