//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UmdrError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in tensor file {path}: expected \"UMDT\", found {found:?}")]
    BadMagic { path: String, found: [u8; 4] },

    #[error("unsupported tensor file version {version} in {path}")]
    BadVersion { path: String, version: u32 },

    #[error("unknown dtype code {code} in {path}")]
    UnknownDtype { path: String, code: u8 },

    #[error("truncated tensor payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: String,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch: expected {expected:?}, found {found:?} ({context})")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
        context: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sample {0} not found in manifest")]
    MissingSample(String),

    #[error("missing file {0}")]
    MissingFile(String),

    #[error("malformed manifest {path}: {reason}")]
    BadManifest { path: String, reason: String },

    #[error("non-finite gradient in parameter {0}; aborting optimizer step")]
    NonFiniteGradient(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, UmdrError>;

impl UmdrError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        UmdrError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(
        expected: impl Into<Vec<usize>>,
        found: impl Into<Vec<usize>>,
        context: impl Into<String>,
    ) -> Self {
        UmdrError::ShapeMismatch {
            expected: expected.into(),
            found: found.into(),
            context: context.into(),
        }
    }
}
