use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dimensions of two operands do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument violates a documented precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// A ratio whose denominator is zero (e.g. disagreement with two zero-accuracy models).
    #[error("undefined denominator: {0}")]
    UndefinedDenominator(String),

    /// Uncertainty rejection discarded every sample.
    #[error("no samples retained at threshold {threshold} (min score {min_score})")]
    EmptyRetention { threshold: f64, min_score: f64 },

    /// CSV ingestion failure; `row` is 1-based and counts the header line when present.
    #[error("parse error in {path} at row {row}: {msg}")]
    Parse {
        path: PathBuf,
        row: usize,
        msg: String,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt file {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },

    #[error("spec mismatch: expected layers {expected:?}, found {found:?}")]
    SpecMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the user's invocation or configuration
    /// rather than by a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
