use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("empty sequence: {0}")]
    EmptySequence(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("malformed tree: {0}")]
    MalformedTree(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn parse(line: usize, msg: impl fmt::Display) -> Self {
        Error::Parse {
            line,
            msg: msg.to_string(),
        }
    }

    /// Short machine-readable category, used by the command-line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::EmptySequence(_) => "empty-sequence",
            Error::Contract(_) => "contract",
            Error::MalformedTree(_) => "malformed-tree",
            Error::Parse { .. } => "parse",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Capability(_) => "capability",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}
