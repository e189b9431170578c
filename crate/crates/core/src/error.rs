use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KwsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KwsError {
    /// A WAV file violates the expected encoding; `field` names the offending header field.
    #[error("unsupported audio format: {field} is {found}, expected {expected}")]
    Format {
        field: &'static str,
        found: String,
        expected: String,
    },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("value out of range: {0}")]
    Range(String),

    /// Caller broke an operation precondition (shape mismatch, empty batch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset ingestion failed: {0}")]
    Ingestion(String),

    #[error("not a model file (bad magic {0:?})")]
    NotModel([u8; 4]),

    #[error("unsupported model file version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("model payload corrupted: expected {expected} bytes, found {actual}")]
    Payload { expected: usize, actual: usize },

    #[error("benchmark harness error: {0}")]
    Harness(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl KwsError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        KwsError::Io {
            context: context.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by the inputs' contents.
    pub fn is_io(&self) -> bool {
        matches!(self, KwsError::Io { .. })
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        // negated on purpose: a NaN operand must fail the check
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        {
            if !$cond {
                return Err($crate::error::KwsError::$variant(format!($($fmt)+)));
            }
        }
    };
}

pub(crate) use ensure;
