use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for n = {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("batch {0} is empty")]
    EmptyBatch(usize),

    #[error("loss is identically zero: no class has two or more members")]
    DegenerateLoss,

    #[error("non-finite {what} at iteration {iter}")]
    NonFinite { what: &'static str, iter: usize },

    #[error("infeasible embedding: {0}")]
    Infeasible(String),

    #[error("metric undefined: {0}")]
    Undefined(&'static str),

    #[error("batch conditions are satisfied; no non-OF optimizer exists")]
    ConditionsSatisfied,

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
