//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Input outside the documented domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Degenerate input (zero norm, zero expert displacement, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Checkpoint replay produced different outputs than the recorded forward pass.
    #[error("checkpoint replay mismatch: max abs diff {max_diff:.3e} exceeds 1e-12")]
    Replay { max_diff: f64 },

    /// Training diverged or produced non-finite values.
    #[error("numeric abort: {0}")]
    NumericAbort(String),

    /// A pretraining quality gate was not met.
    #[error("gate failure: {metric} = {value:.6} exceeds threshold {threshold:.6}")]
    Gate {
        metric: &'static str,
        value: f64,
        threshold: f64,
    },

    /// A persisted artifact failed to parse or validate.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
