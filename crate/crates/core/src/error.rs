use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Shape(String),

    /// Invalid architecture, solver or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API precondition (non-scalar loss root, bad class index, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A non-finite value appeared during integration or training.
    #[error("numerical divergence at {context}: {detail}")]
    Divergence { context: String, detail: String },

    /// Adaptive integration gave up (step underflow or step budget exhausted).
    #[error("convergence error: {0}")]
    Convergence(String),

    /// Dataset files are missing, truncated or malformed.
    #[error("ingestion error in {}: {detail}", path.display())]
    Data { path: PathBuf, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
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

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
