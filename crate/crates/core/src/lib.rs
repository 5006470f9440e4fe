//! Regime-switching stochastic linear-quadratic control.
//!
//! Builds approximate optimal controls for LQ problems whose coefficients are
//! modulated by a finite-state Markov chain, by solving a family of
//! perturbed Riccati equations and adjoint BSDEs and sending the
//! perturbation `ε → 0`.

pub mod bsde;
pub mod chain;
pub mod cli;
pub mod control;
pub mod error;
pub mod export;
pub mod grid;
pub mod linalg;
pub mod oracle;
pub mod problem;
pub mod riccati;
pub mod sim;
pub mod sweep;

pub use error::{Error, Result};
pub use grid::TimeGrid;
