use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("empty candidate pool: {0}")]
    EmptyPool(String),

    #[error("support pool has {available} eligible items but K = {required} are required")]
    PoolTooSmall { required: usize, available: usize },

    #[error("embedding provider is missing ids: {}", .0.join(", "))]
    MissingIds(Vec<String>),

    #[error("no gradient for trainable tensor `{0}`")]
    MissingGradient(String),

    #[error("training diverged: non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("bad magic at byte offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: usize,
        expected: String,
        found: String,
    },

    #[error("unsupported format version {version} at byte offset {offset}")]
    UnsupportedVersion { version: u8, offset: usize },

    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("dimension overflow at byte offset {offset}")]
    DimOverflow { offset: usize },

    #[error("malformed data at byte offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
