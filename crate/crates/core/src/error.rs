use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A dataset or checkpoint file failed validation.
    #[error("format error in {}{}: {message}", path.display(), location(*row, *col))]
    Format {
        path: PathBuf,
        row: Option<usize>,
        col: Option<usize>,
        message: String,
    },

    #[error("initialization error: {0}")]
    Initialization(String),

    /// A soft cluster frequency reached zero, so the target distribution is undefined.
    #[error("degenerate cluster {cluster}: soft frequency is zero")]
    DegenerateCluster { cluster: usize },

    #[error("non-finite {phase} loss at iteration {iter}")]
    NonFinite { phase: String, iter: usize },

    #[error("cluster collapse during {phase} at iteration {iter}: cluster {cluster} is empty")]
    Collapse {
        phase: String,
        iter: usize,
        cluster: usize,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn location(row: Option<usize>, col: Option<usize>) -> String {
    match (row, col) {
        (Some(r), Some(c)) => format!(" at row {r}, column {c}"),
        (Some(r), None) => format!(" at row {r}"),
        (None, Some(c)) => format!(" at column {c}"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            row: None,
            col: None,
            message: message.into(),
        }
    }
}
