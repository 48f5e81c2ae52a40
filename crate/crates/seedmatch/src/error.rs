//! Crate-wide error type.
//!
//! Numeric routines report shape mismatches and contract violations as
//! recoverable errors rather than panics so that callers (notably the CLI)
//! can map them onto meaningful diagnostics.

use thiserror::Error;

/// All failures surfaced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands had incompatible dimensions for the named operation.
    #[error("{op}: dimension mismatch: left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// A single operand had an unusable shape (e.g. empty, or wrong width).
    #[error("{op}: bad shape {rows}x{cols}: {reason}")]
    BadShape {
        op: &'static str,
        rows: usize,
        cols: usize,
        reason: String,
    },

    /// An input violated a documented precondition.
    #[error("contract violation in {op}: {reason}")]
    Contract { op: &'static str, reason: String },

    /// A computation produced NaN or infinity where a finite value is required.
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    /// No seed correspondences could be produced for a pair of keypoint sets.
    #[error("unseedable pair: {0}")]
    Unseedable(String),

    /// A serialized artifact was malformed or had an unsupported version.
    #[error("format error: {0}")]
    Format(String),

    /// An invalid run configuration (bad flag value, unknown field, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A numeric failure during training or optimization (e.g. NaN loss).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Convenience constructor for [`Error::Contract`].
    pub fn contract(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Contract {
            op,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
