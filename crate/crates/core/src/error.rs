use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the linking engine.
#[derive(Debug, Error)]
pub enum BelxError {
    #[error("I/O error after {rows} rows: {source}")]
    Io {
        rows: u64,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("format mismatch: {malformed} of {total} rows malformed")]
    FormatMismatch { malformed: u64, total: u64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate vector: zero norm")]
    DegenerateVector,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("no embedding stored for {0:?}")]
    MissingEmbedding(String),

    #[error("encoder failed on alias {alias:?}: {message}")]
    Encoder { alias: String, message: String },

    #[error("remote request failed after {attempts} attempts: {message}")]
    Retryable { attempts: u32, message: String },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("training aborted at epoch {epoch} step {step}: {message}")]
    TrainingAborted {
        epoch: usize,
        step: usize,
        message: String,
    },

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("checksum mismatch for {artifact}; re-run stage `{stage}`")]
    Checksum { artifact: PathBuf, stage: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl BelxError {
    /// Process exit status: 2 for configuration errors, 4 for invariant
    /// violations, 3 for any other stage failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Invariant(_) => 4,
            _ => 3,
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::File {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = BelxError> = std::result::Result<T, E>;
