use thiserror::Error;

/// Errors raised anywhere in the translation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {op} got {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index error: id {id} out of range for size {size}")]
    Index { id: usize, size: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
