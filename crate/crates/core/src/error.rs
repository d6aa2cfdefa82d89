use omdet_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("lookup error: no embedding for word {0:?}")]
    Lookup(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric error in {0}")]
    Numeric(String),

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Tensor(TensorError::Config(_)) => 2,
            Error::Numeric(_) | Error::Tensor(TensorError::NonFinite { .. }) => 4,
            Error::Data(_) | Error::Format { .. } | Error::Lookup(_) | Error::Io { .. } => 3,
            Error::Usage(_) | Error::Tensor(_) => 1,
        }
    }
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn data(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}
