use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: ragged row {row} has {found} cells, expected {expected}")]
    RaggedRow {
        path: PathBuf,
        line: usize,
        row: usize,
        found: usize,
        expected: usize,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("dimension mismatch: expected {expected}, found {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("no negative candidate: all questions share table `{0}`")]
    NoNegativeCandidate(String),

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("non-finite gradient in tensor `{tensor}` at element {index}")]
    NonFiniteGradient { tensor: String, index: usize },

    #[error("zero-norm embedding cannot be normalized ({0})")]
    ZeroNorm(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used for machine-parsable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Malformed { .. } => "malformed",
            Error::RaggedRow { .. } => "ragged_row",
            Error::DuplicateId(_) => "duplicate_id",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Empty(_) => "empty",
            Error::Invalid(_) => "invalid",
            Error::NoNegativeCandidate(_) => "no_negative",
            Error::UnknownId(_) => "unknown_id",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::ZeroNorm(_) => "zero_norm",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Json(_) => "json",
        }
    }
}
