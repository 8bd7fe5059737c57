use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KredError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KredError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown {kind} `{name}`")]
    Vocabulary { kind: &'static str, name: String },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl KredError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        KredError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KredError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error class: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            KredError::Config(_) => 1,
            KredError::Numeric(_) | KredError::Dimension { .. } => 3,
            _ => 2,
        }
    }
}
