use thiserror::Error;

use crate::experiments::RunRecord;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    /// `var + eps == 0` for a batch-norm feature.
    #[error("degenerate variance in batch norm (layer {layer}, feature {feature})")]
    DegenerateVariance { layer: usize, feature: usize },

    /// A PSI group with zero norm; the metric is undefined there.
    #[error("degenerate point: PSI group {group} has zero norm")]
    DegeneratePoint { group: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Loss or gradient became non-finite. Carries every record logged before the failure.
    #[error("run diverged at step {step}")]
    Diverged {
        step: usize,
        records: Box<Vec<RunRecord>>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension { op, expected, got }
    }
}
