//! Mean field games with controlled drift and volatility.
//!
//! Relaxed best responses by HJB grids or BSDE regression, damped fixed points
//! for the equilibrium measure, conditional bucketing on common-noise cells and
//! a Monte Carlo 2BSDE certificate.

pub mod bench;
pub mod bestresponse;
pub mod builtin;
pub mod cli;
pub mod equilibrium;
pub mod error;
pub mod hamiltonian;
pub mod measures;
pub mod model;
pub mod rng;
pub mod simplex;
#[cfg(test)]
mod testing;

pub use error::{Error, Result};
