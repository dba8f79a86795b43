//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument left the mathematical domain of an operation
    /// (non-positive noise scale, non-finite lambda, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an API contract (mismatched lengths, stale cache, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Not enough observations to compute the requested statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A proposal assigns zero probability to a point the base
    /// distribution can produce; density ratios are undefined there.
    #[error("absolute continuity violated: {0}")]
    AbsoluteContinuity(String),

    /// A population whose weights are all zero cannot be normalized.
    #[error("degenerate population: {0}")]
    DegeneratePopulation(String),

    /// Exhaustive simplex search is only feasible on small grids.
    #[error("unsupported grid size {got}: exhaustive search handles at most {max} points")]
    UnsupportedSize { got: usize, max: usize },

    /// Training produced a non-finite loss; carries a diagnostic snapshot.
    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFinite { step: u64, diagnostics: String },

    /// ODE sampling produced a non-finite state at the given noise level.
    #[error("sampling failed: non-finite state at sigma = {sigma}")]
    Sampling { sigma: f64 },

    /// A configuration file is malformed or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
