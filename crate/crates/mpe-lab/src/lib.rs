//! Marginal-policy-effect laboratory for centralized allocation markets.
//!
//! The crate builds synthetic market scenarios (policy law → report law →
//! allocation mechanism → market conduct rule → outcomes), constructs the
//! equilibrium-adjusted outcome per agent, computes marginal policy effects
//! analytically as score covariances (or Sobolev pairings where the conduct
//! rule requires it), and certifies every analytic object against an
//! independent finite-difference oracle that perturbs the policy law and
//! re-solves the market.

pub mod clearing;
pub mod cli;
pub mod externality;
pub mod linalg;
pub mod mechanism;
pub mod oracle;
pub mod pipeline;
pub mod population;
pub mod quad;
pub mod report;
pub mod rootfind;
pub mod scenarios;
pub mod special;
pub mod welfare;

use thiserror::Error;

/// Crate-wide error taxonomy. Variants map onto the failure modes surfaced
/// by the CLI (config → exit 2, solver → exit 3, tolerance → exit 1).
#[derive(Debug, Error)]
pub enum MpeError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("path error: positivity violated, max admissible |theta| = {max_theta}")]
    Path { max_theta: f64 },
    #[error("infeasible capacity: {0}")]
    InfeasibleCapacity(String),
    #[error("solver did not converge: {0}")]
    Convergence(String),
    #[error("gradient undefined: {0}")]
    GradientUndefined(String),
    #[error("grid too coarse: {0}")]
    Resolution(String),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("ill-posed functional: {0}")]
    IllPosed(String),
    #[error("weak instrument: |cov(W,Z)| = {0}")]
    WeakInstrument(f64),
    #[error("incompatible spaces: {0}")]
    SpaceMismatch(String),
    #[error("oracle unstable: {0}")]
    OracleUnstable(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MpeError>;
