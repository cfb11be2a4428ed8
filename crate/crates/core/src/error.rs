use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation's contract.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A hyperparameter or structural setting is out of bounds.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller broke an API contract (e.g. backward on a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    /// Bad user-supplied data such as out-of-vocabulary token ids.
    #[error("input error: {0}")]
    Input(String),

    #[error("generation error: {0}")]
    Generation(String),

    /// Training produced a non-finite loss.
    #[error("numerical abort at step {step}: loss = {loss}")]
    NonFinite { step: usize, loss: f64 },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("probe froze encoder but checksum changed ({before} -> {after})")]
    ChecksumChanged { before: String, after: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
