//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by model construction, numerics, and the LMI backend.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input (shape mismatch, invariant violation,
    /// out-of-range argument, non-finite data).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A Schur-complement pivot block was not positive definite.
    #[error("pivot not positive definite: {0}")]
    PivotNotPositive(String),

    /// The feedback-gain operator is undefined because the gamma-shifted
    /// quadratic term is not uniformly sign-definite.
    #[error("gain undefined: {0}")]
    GainUndefined(String),

    /// Drawing from a transition law failed (degenerate row or kernel slice).
    #[error("sampling error: {0}")]
    SamplingError(String),

    /// The semidefinite solver failed numerically (not an infeasibility
    /// verdict). Carries the solver's status and iteration summary.
    #[error("solver failure: {0}")]
    SolverFailure(String),

    /// The margin-maximization problem is unbounded: the system has no
    /// constant blocks pinning the scale, so "feasibility" is vacuous.
    #[error("degenerate system: {0}")]
    DegenerateSystem(String),

    /// An independently re-evaluated certificate did not satisfy the claimed
    /// inequalities.
    #[error("verification failure: {0}")]
    VerificationFailure(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
