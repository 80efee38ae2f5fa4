//! Finite-horizon discrete-time stochastic LQ control with indefinite weights.
//!
//! The crate decides closed-loop solvability through the generalized
//! (pseudoinverse) Riccati recursion, probes open-loop solvability with an
//! ε-regularized family of problems, extracts weak closed-loop feedback
//! representations of open-loop optimal controls, and checks all of it
//! against an exact dynamic-programming oracle on the binary ±1 noise tree.
//!
//! Module map:
//!
//! - [`matnum`]: pseudoinverse, PSD and range-inclusion tests.
//! - [`tree`]: scenario-tree indexing and tree-adapted processes.
//! - [`model`]: problem data, JSON schema, homogeneous projection.
//! - [`riccati`]: generalized Riccati recursion, regularity, value function.
//! - [`stationarity`]: rollouts, co-states, equilibrium residuals.
//! - [`oracle`]: exact expected costs and exact open-loop minimization.
//! - [`perturb`]: ε-sweeps, boundedness verdicts, limit extraction.
//! - [`sim`]: seeded Monte-Carlo cost estimation.
//! - [`cli`]: the `slq` command-line driver.

// `!(x <= tol)` is deliberate throughout: NaN has to fail every check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod exec;
pub mod matnum;
pub mod model;
pub mod oracle;
pub mod perturb;
pub mod riccati;
pub mod sim;
pub mod stationarity;
pub mod tree;

pub use error::{Error, Result};
pub use exec::Execution;
pub use matnum::{Matrix, Tolerances, Vector};
pub use model::{LQProblem, NoiseKind, NoiseSpec, Strategy};
pub use tree::AdaptedProcess;

/// Version tag written into every JSON report.
pub const SCHEMA_VERSION: u32 = 1;
