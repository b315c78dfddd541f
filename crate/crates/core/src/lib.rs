//! Anytime linear model predictive control on top of a piecewise-smooth
//! Newton feasibility solver.
//!
//! * [`problem`]: convex functions, feasibility and optimization problems, merit function.
//! * [`feas`]: regularized Newton feasibility solver with Armijo backtracking.
//! * [`opt`]: level-set bisection with dual lower and interpolated upper bounds.
//! * [`terminal`]: steady-state targets, ellipsoid levels, invariant polyhedra, Riccati gains.
//! * [`mpc`]: MPC problem construction, shifted fallback plans and the anytime controller.
//! * [`sim`]: closed-loop simulation and solver timing harness.

pub mod budget;
pub mod error;
pub mod feas;
pub mod formats;
pub mod opt;
pub mod problem;
pub mod sim;
pub mod mpc;
pub mod terminal;

pub use budget::Budget;
pub use error::{Error, Result};
