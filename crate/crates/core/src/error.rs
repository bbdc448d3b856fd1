use thiserror::Error;

use crate::scenario::ValidationReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),

    #[error("aggregator {aggregator} needs {min_slots} slots but the horizon has {horizon}")]
    NoFeasibleStart {
        aggregator: usize,
        min_slots: usize,
        horizon: usize,
    },

    #[error("scenario failed validation:\n{0}")]
    InvalidScenario(ValidationReport),

    #[error("unsupported schema version {found:?} (expected {expected:?})")]
    SchemaVersion { found: String, expected: String },

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("span mismatch: expected {expected} slots, got {found}")]
    SpanMismatch { expected: usize, found: usize },

    #[error("aggregator {aggregator}: grid budget {budget} kWh exceeds window capacity {capacity} kWh")]
    InfeasibleBudget {
        aggregator: usize,
        budget: f64,
        capacity: f64,
    },

    #[error("invalid start profile: {0}")]
    InvalidStartProfile(String),

    #[error("payoff tensor incomplete: {missing} of {total} entries missing")]
    IncompleteTensor { missing: usize, total: usize },

    #[error("digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("corrupt cache file: {0}")]
    CacheFormat(String),

    #[error("aggregator {aggregator} has zero baseline cost; saving percentage is undefined")]
    UndefinedPercentage { aggregator: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
