use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid shape {rows}x{cols}: {reason}")]
    Shape {
        rows: usize,
        cols: usize,
        reason: &'static str,
    },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },

    /// The call sequence is wrong, e.g. backward on a forward recorded without caching.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite loss {value} at {param}[{row}, {col}]")]
    NonFinite {
        param: String,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("integer overflow evaluating {0}")]
    Overflow(&'static str),

    #[error(
        "reconciliation failed in {mode} mode on {term}: counter {counted}, formula {expected}"
    )]
    Reconcile {
        mode: String,
        term: &'static str,
        counted: u128,
        expected: u128,
    },

    #[error("benchmark clock error: {0}")]
    Clock(String),
}
