//! Crate-wide error type.
//!
//! All fallible operations return [`Result`]. Variants are grouped by what
//! went wrong physically or numerically rather than by module, so callers can
//! match on the failure class without knowing which layer raised it.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter lies outside its physically meaningful domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A requested evaluation point lies outside tabulated support.
    #[error("range error: {0}")]
    Range(String),

    /// State support reached the edge of the angular-momentum window, or the
    /// probability leaked past the window edge exceeded its budget.
    #[error("truncation error: {0}")]
    Truncation(String),

    /// An input record is too short for the requested estimate.
    #[error("insufficient record length: {0}")]
    InsufficientLength(String),

    /// The state norm drifted beyond tolerance during propagation.
    #[error("norm drift: {0}")]
    NormDrift(String),

    /// An integrator self-check failed (a conserved quantity drifted).
    #[error("stability error: {0}")]
    Stability(String),

    /// An iterative fit exhausted its iteration budget without converging.
    #[error("fit did not converge: {0}")]
    NonConvergence(String),
}
