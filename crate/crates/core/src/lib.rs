//! Optimal control of a random-coefficient elliptic PDE under uncertainty.
//!
//! The crate approximates
//!
//! ```text
//! minimize  ι_A(z) + f(z) + h(E[G(ξ, z)])
//! ```
//!
//! by piecewise-constant controls, P1 finite elements, sample averages,
//! smoothing of `max{0,·}` and an augmented Lagrangian for buffered
//! failure-probability constraints, and records the approximate optimal
//! values along a schedule so that the optimality gap of the resulting
//! control can be bounded.
//!
//! Modules, bottom-up:
//! - [`fem`]: meshes, P0 controls, P1 states, state and adjoint solves.
//! - [`field`]: log-linear random conductivity fields.
//! - [`risk`]: superquantiles, buffered probability, `smax`.
//! - [`problem`]: the sample-average objective and its adjoint gradient.
//! - [`optimizer`]: projected-gradient inner solver and the staged outer loop.
//! - [`epi`]: synthetic problems demonstrating the ε + δ gap bound.

pub mod epi;
pub mod error;
pub mod fem;
pub mod field;
pub mod optimizer;
pub mod problem;
pub mod profile;
pub mod risk;
pub mod tridiag;

pub use error::{Error, Result};
