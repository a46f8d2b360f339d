//! Periodic mean-field stochastic LQ control toolkit.
//!
//! The library solves linear-quadratic control problems whose state feels
//! both its own value and its mean, with τ-periodic coefficients and
//! multiplicative noise, and quantifies how fast finite-horizon solutions
//! collapse onto the periodic stationary regime (the turnpike).
//!
//! Module layout:
//! - [`model`]: problem description, coefficient builders, grid tables
//! - [`numerics`]: RK4 kernels, PSD utilities, decay fits
//! - [`stability`]: mean-square stability, Lyapunov equations, detectability,
//!   stabilizer synthesis
//! - [`riccati`]: finite-horizon and periodic stationary Riccati equations
//! - [`periodic_lq`]: stationary offsets, periodic moments, optimality residual
//! - [`turnpike`]: gap curves, trajectory comparison, decay-rate fitting
//! - [`montecarlo`]: particle simulation cross-checks

pub mod cli;
pub mod error;
pub mod model;
pub mod montecarlo;
pub mod numerics;
pub mod periodic_lq;
pub mod riccati;
pub mod stability;
pub mod turnpike;

pub use error::{Error, Result};
