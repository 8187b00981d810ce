use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("context overflow: sequence of {len} tokens exceeds context {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("degenerate span: no scored positions")]
    DegenerateSpan,

    #[error("non-finite value in `{tensor}`")]
    NonFinite { tensor: String },

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate generator: dropped {dropped} of {requested} samples")]
    DegenerateGenerator { dropped: usize, requested: usize },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u8),

    #[error("malformed checkpoint header: {0}")]
    Header(String),

    #[error("truncated checkpoint: need {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("incomplete run: missing {0}")]
    IncompleteRun(String),

    #[error("run directory {0} already exists (use --force)")]
    RunDirExists(PathBuf),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::GradCheck(_) => 3,
            Error::IncompleteRun(_) => 4,
            _ => 2,
        }
    }
}
