//! Experiment runner for the backscatter link simulator: scenario sweeps,
//! aggregation, result files and acceptance checks.

// `!(x > 0.0)` is used on purpose: NaN must fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod emit;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod record;
pub mod scenario;
pub mod spec;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("bad experiment spec: {0}")]
    Spec(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] backsim_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
