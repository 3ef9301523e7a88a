use std::path::PathBuf;

/// Errors raised by the concept learning and transfer pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("timestep {t} out of range [{min}, {max}]")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown placeholder `{0}` in prompt")]
    UnknownPlaceholder(String),

    #[error("prompt template is missing placeholder `{0}`")]
    MissingPlaceholder(String),

    #[error("token `{0}` does not appear in the prompt")]
    TokenNotInPrompt(String),

    #[error("duplicate concept token `{0}`")]
    DuplicateToken(String),

    #[error("mask has no nonzero entries")]
    EmptyMask,

    #[error("attention map is constant; cannot extract a region ({0})")]
    DegenerateAttention(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint is corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("backend is not available: {0}")]
    BackendUnavailable(String),

    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
