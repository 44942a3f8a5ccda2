//! Error type shared by every module, with the CLI exit-code mapping.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, TideError>;

#[derive(Debug, thiserror::Error)]
pub enum TideError {
    /// Invalid configuration value or inconsistent settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// Shapes that should agree do not.
    #[error("dimension mismatch: {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A hook points at a layer the model does not have.
    #[error("hook error: layer {layer} out of range for depth {depth}")]
    Hook { layer: usize, depth: usize },

    /// Structural problem in a binary file (magic, version, layout).
    #[error("format error: {0}")]
    Format(String),

    /// Payload shorter than its header promises.
    #[error("length error: expected {expected} bytes, got {got}")]
    Length { expected: usize, got: usize },

    /// Numeric content that fails validation (NaN/Inf, empty data).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite loss or other numeric blow-up during training.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// API misuse (empty input sets, invalid edit indices, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error at {path:?} (offset {offset:?}): {source}")]
    Io {
        path: Option<PathBuf>,
        offset: Option<u64>,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl From<std::io::Error> for TideError {
    fn from(source: std::io::Error) -> Self {
        TideError::Io {
            path: None,
            offset: None,
            source,
        }
    }
}

impl TideError {
    pub fn config(msg: impl Into<String>) -> Self {
        TideError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        TideError::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        TideError::Usage(msg.into())
    }

    pub fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TideError::Io {
            path: Some(path.into()),
            offset: None,
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            TideError::Config(_) | TideError::Hook { .. } | TideError::Usage(_) => 2,
            TideError::Dimension { .. } => 2,
            TideError::Numeric(_) => 4,
            TideError::Format(_)
            | TideError::Length { .. }
            | TideError::Data(_)
            | TideError::Io { .. }
            | TideError::Json(_)
            | TideError::Csv(_) => 3,
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(TideError::Dimension {
            what,
            expected,
            got,
        })
    }
}
