//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("degenerate training split (fold {fold}, cell {cell}): {message}")]
    FoldDegeneracy {
        fold: usize,
        cell: usize,
        message: String,
    },

    #[error("test infeasible: {0}")]
    TestInfeasible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data/validation,
    /// 3 estimation infeasible.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Schema(_) => 1,
            Error::Parse { .. } | Error::Validation(_) | Error::Io(_) => 2,
            Error::Partition(_) | Error::FoldDegeneracy { .. } | Error::TestInfeasible(_) => 3,
            Error::Internal(_) => 3,
        }
    }
}
