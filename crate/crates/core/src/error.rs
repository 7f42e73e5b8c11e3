use std::path::PathBuf;

use thiserror::Error;

/// Every failure the lab can report, grouped by the contract that was broken.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("placement error: {0}")]
    Placement(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("vocabulary error: unknown {field} {value:?}")]
    Vocabulary { field: &'static str, value: String },

    #[error("framing error: {0}")]
    Framing(String),

    #[error("infeasible budget: target {target} is below the minimum constructible count {minimum}")]
    InfeasibleBudget { target: u64, minimum: u64 },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> LabError {
    LabError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
