//! Pseudospectral solver for the compressible k-ε turbulent flow system written
//! in perturbation variables around the constant state `(ρ̄, 0, 0, k̄, 0)`,
//! together with the energy/dissipation functionals and the integral-identity
//! audits used to monitor small-data stability on a periodic box.
//!
//! Module map:
//!
//! - [`grid`]: periodic tensor grid, FFTs, spectral derivatives, dealiasing, quadrature.
//! - [`model`]: γ-law closures, source terms, right-hand side and conservative cross-check.
//! - [`integrator`]: classical RK4 with stability-derived steps and admissibility guards.
//! - [`energy`]: Sobolev norms, energy/dissipation, Lyapunov functional, identity audits.
//! - [`harness`]: configuration, initial conditions, experiment drivers and file output.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the tensor notation of the formulas.
#![allow(clippy::needless_range_loop)]

pub mod energy;
pub mod error;
pub mod grid;
pub mod harness;
pub mod integrator;
pub mod model;
pub mod par;
pub mod quadrature;

pub use error::{Error, Result};
pub use grid::{Grid, ScalarField, SpectralField};
pub use model::{ModelParams, PerturbationState, Tendency};
pub use par::Execution;
