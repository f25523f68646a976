use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad user-supplied data (token ids, dataset sizes).
    #[error("invalid input: {0}")]
    Input(String),

    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("training diverged at parameter `{param}`: {reason}")]
    Training { param: String, reason: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit status for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Io(_) | Error::Format(_) => 3,
            Error::Training { .. } => 4,
            _ => 1,
        }
    }
}
