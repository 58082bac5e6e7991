//! Numerical laboratory for a one-dimensional semiclassical dispersive equation
//! driven by an oscillating source.
//!
//! The crate evaluates dispersion symbols, solves the linear problem exactly on the
//! Fourier side, builds stationary-phase wave packets, evaluates the limiting
//! interference profiles and computes the first Picard iterate of the nonlinear problem.

pub mod acceptance;
pub mod asymptotics;
pub mod cli;
pub mod error;
pub mod linear_solver;
pub mod nonlinear;
pub mod oscquad;
pub mod sources;
pub mod symbols;
pub mod toy_ode;
pub mod wavepackets;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
