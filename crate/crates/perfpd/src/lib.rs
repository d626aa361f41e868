//! Primal-dual stochastic optimization when the data distribution reacts to
//! the deployed decision.
//!
//! The library models the reaction with a location family: deploying a
//! decision `theta` shifts a fixed base distribution by `A * theta`. The
//! solver runs a regularized primal-dual loop under explicit inequality
//! constraints and, when the shift matrix `A` is unknown, learns it on the
//! fly from paired observations via recursive least squares.
//!
//! Module map:
//! - [`distmap`]: location-family distribution maps and their diagnostics
//! - [`problem`]: losses, constraint sets, feasible-set projections, and
//!   closed-form risk/optimum oracles for the two shipped experiment families
//! - [`estimator`]: online least-squares estimation of the shift matrix
//! - [`solver`]: the adaptive primal-dual loop and its building blocks
//! - [`experiments`]: reproducible experiment builders and replica harness
//! - [`cli_report`]: command-line front end, CSV/manifest serialization

pub mod cli_report;
pub mod distmap;
pub mod estimator;
pub mod experiments;
pub mod problem;
pub mod solver;

use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("objective is not strongly convex: {0}")]
    NotStronglyConvex(String),

    #[error("covariance matrix is not positive semidefinite (eigenvalue {0:.3e})")]
    NotPsd(f64),

    #[error("horizon too short for the dual step size rule: need T >= {required}, got {got}")]
    HorizonTooShort { required: u64, got: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("solver failed to converge: {0}")]
    NoConvergence(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
