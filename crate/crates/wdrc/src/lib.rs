//! Distributionally robust stochastic control with Wasserstein ambiguity sets.
//!
//! The crate is organized around the pieces needed to set up and solve a
//! discounted minimax control problem where the adversary picks disturbance
//! distributions from a Wasserstein ball (or pays a Wasserstein penalty):
//!
//! - [`distributions`]: discrete distributions, transport plans, Wasserstein
//!   distances and ball membership.
//! - [`problem`]: problem instances, grid value functions, stationary policies.
//! - [`bellman`]: the dual-reformulated Bellman operators `T`, `T^pi` and the
//!   penalty operator, plus worst-case distribution extraction.
//! - [`solvers`]: value iteration, policy iteration and modified policy
//!   iteration behind a common trait, selectable by name.
//! - [`concentration`]: measure-concentration bound and a-priori radius.
//! - [`lq`]: closed-form linear-quadratic results for the penalty problem.
//! - [`power`]: power-network model assembly (Kron reduction, swing dynamics).
//! - [`harness`]: experiment reproduction and out-of-sample evaluation.
//! - [`cli`]: command-line entry point used by the `wdrc` binary.

pub mod bellman;
pub mod cli;
pub mod concentration;
pub mod config;
pub mod distributions;
pub mod harness;
pub mod lq;
pub mod power;
pub mod problem;
pub mod simplex;
pub mod solvers;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("did not converge: {0}")]
    NonConverged(String),
    #[error("state out of domain: {0}")]
    OutOfDomain(String),
    #[error("unsupported regime: {0}")]
    UnsupportedRegime(String),
    #[error("unsupported instance: {0}")]
    UnsupportedInstance(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
