use std::path::PathBuf;

/// Errors produced by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("{what} {value} out of range [0, {bound})")]
    Range { what: &'static str, value: u64, bound: u64 },
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("search space has {size} subnets, above the enumeration limit {limit}; use evolutionary search instead")]
    TooLarge { size: u64, limit: u64 },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("constraint infeasible: {0}")]
    Infeasible(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad input or configuration rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Config(_) | Error::Usage(_) | Error::Range { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
