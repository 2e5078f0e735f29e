//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the laboratory's operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A reward group was too small to normalize (needs at least two samples).
    #[error("invalid group: {0}")]
    InvalidGroup(String),

    /// A numeric input was rejected (non-finite value, non-positive ratio, ...).
    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// Matrix or vector shapes do not agree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// The requested frame selection cannot be satisfied within the budget.
    #[error("budget infeasible: {0}")]
    BudgetInfeasible(String),

    /// Softmax temperature must be strictly positive.
    #[error("invalid temperature: {0} (must be > 0)")]
    InvalidTemperature(f64),

    /// A temporal segment was empty.
    #[error("invalid segment: {0}")]
    InvalidSegment(String),

    /// An index was out of range.
    #[error("invalid index: {0}")]
    InvalidIndex(String),

    /// A run configuration is contradictory or incomplete.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A parameter update was rejected (non-finite gradient); the step is skipped.
    #[error("update rejected: {0}")]
    UpdateRejected(String),

    /// A series operation received an empty input.
    #[error("empty series")]
    EmptySeries,

    /// Embedding file does not start with the expected magic bytes.
    #[error("bad magic at offset 0: expected \"FEMB\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    /// Embedding file carries an unsupported format version.
    #[error("unsupported version at offset 4: expected 1, found {found}")]
    BadVersion { found: u32 },

    /// Embedding file ended before the declared payload was complete.
    #[error("truncated file at offset {offset}: expected {expected} bytes, found {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },

    /// Embedding file header declares inconsistent or zero dimensions.
    #[error("bad dimensions at offset {offset}: {detail}")]
    BadDimensions { offset: usize, detail: String },

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
