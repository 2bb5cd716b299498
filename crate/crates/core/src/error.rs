use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed timecode {0:?}: expected HH:MM:SS")]
    MalformedTimecode(String),

    #[error("invalid time range [{start}, {end})")]
    InvalidRange { start: f64, end: f64 },

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("backend refusal: {0}")]
    BackendRefusal(String),

    #[error("empty payload: {0}")]
    EmptyPayload(&'static str),

    #[error("frame budget exceeded: {requested} frames requested, cap is {cap}")]
    FrameBudgetExceeded { requested: usize, cap: usize },

    #[error("missing frames: {0}")]
    MissingFrames(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("bundle format version {found} is not supported (this build reads {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("corrupt bundle: {0}")]
    CorruptBundle(String),

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that originate in a model backend.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::BackendUnavailable(_) | Error::BackendRefusal(_)
        )
    }
}
