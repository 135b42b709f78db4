//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are inconsistent with the operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is outside its valid range.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset ingestion or labeling problem.
    #[error("data error: {0}")]
    Data(String),

    /// A softmax/pooling mask selects no positions.
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    /// Non-finite value where the contract requires finite arithmetic.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An index is out of range for its container.
    #[error("index error: {0}")]
    Index(String),

    /// Checkpoint file is malformed, truncated, or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Prompt template is missing a required placeholder.
    #[error("template error: {0}")]
    Template(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
