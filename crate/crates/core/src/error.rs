use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("training diverged in {context}{}", epoch.map(|e| format!(" at epoch {e}")).unwrap_or_default())]
    Divergence {
        context: &'static str,
        epoch: Option<usize>,
    },

    #[error("invalid layer spec: {0}")]
    Spec(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("degenerate contingency table: {0}")]
    DegenerateTable(String),

    #[error("degenerate clusters: {0}")]
    DegenerateClusters(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid value at line {line}: {msg}")]
    Value { line: usize, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Shape { op, lhs, rhs }
    }
}
