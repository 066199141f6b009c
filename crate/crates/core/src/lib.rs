//! Monte Carlo simulation of quantum state diffusion.
//!
//! A quantum system coupled to an unresolved environment through a set of
//! coupling operators `{L_m}` can be unraveled into stochastic trajectories
//! whose ensemble mean reproduces the deterministic Lindblad dynamics. This
//! crate implements three interchangeable trajectory engines over the same
//! complex white-noise increments:
//!
//! - a nonlinear state-vector engine (the quantum-state-diffusion form),
//! - a nonlinear density-matrix engine, and
//! - a linear engine that propagates an unnormalized matrix `R` together with
//!   a scalar weight `w = Tr R`, so that importance-weighted averages of the
//!   linear trajectories reproduce the nonlinear statistics.
//!
//! On top of the engines sit a fixed-step Runge–Kutta reference solver for
//! the ensemble-mean dynamics ([`lindblad`]), measurement experiments that
//! observe collapse to eigenstates with Born-rule frequencies
//! ([`experiment`]), and a deterministic, reproducible ensemble runner with
//! uncertainty estimates ([`ensemble`]).

pub mod compare;
pub mod engine;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod lindblad;
pub mod noise;
pub mod operators;
pub mod stats;

pub use error::{Error, Result};

/// Complex scalar used throughout; all arithmetic is double precision.
pub type C64 = num_complex::Complex64;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Validation tolerances and engine thresholds.
///
/// Input validation uses `1e-10` bounds (double precision with up to ~1e6
/// accumulated steps); positivity checks run through eigensolvers and get a
/// looser floor.
pub mod tolerances {
    /// Max allowed deviation from `A = A†` elementwise.
    pub const HERMITICITY: f64 = 1e-10;
    /// Max allowed deviation of a trace from its target.
    pub const TRACE: f64 = 1e-10;
    /// Max allowed deviation of a state-vector norm from one.
    pub const NORM: f64 = 1e-10;
    /// Eigenvalue floor for positive-semidefinite checks.
    pub const PSD: f64 = 1e-8;
    /// Weight below which a linear trajectory is flagged dead.
    pub const WEIGHT_DEAD: f64 = 1e-12;
    /// `dt * max_m ‖L_m‖²` above this triggers a step-size warning.
    pub const STEP_WARN: f64 = 0.1;
    /// `dt * max_m ‖L_m‖²` above this rejects the run.
    pub const STEP_REJECT: f64 = 0.5;
    /// Default diagonal threshold for declaring a diffusion endpoint.
    pub const ENDPOINT: f64 = 1e-4;
    /// Default off-diagonal magnitude for declaring a disentangled state.
    pub const OFFDIAG: f64 = 1e-3;
}
