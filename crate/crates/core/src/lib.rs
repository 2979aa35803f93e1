//! Differentially private non-convex optimization toolkit.
//!
//! The crate is organized around a drift-controlled variance-reduced
//! optimizer that finds approximate second-order stationary points of
//! empirical and population risks under a privacy budget, together with
//! the supporting machinery:
//!
//! - [`objective`]: synthetic problem family with analytically known
//!   Lipschitz/smoothness/Hessian-Lipschitz constants and exact
//!   empirical/population evaluation.
//! - [`privacy`]: mechanism primitives (Laplace, Gaussian calibration),
//!   composition rules, and a strict budget ledger.
//! - [`oracle`]: noisy gradient oracles of the first kind (point
//!   gradients) and second kind (gradient differences), empirical and
//!   population variants.
//! - [`spider`]: the drift-tracked variance-reduced iteration with a
//!   saddle-escape re-anchor branch, plus derivation of all run
//!   parameters from the problem constants.
//! - [`select`]: private candidate selection via a two-statistic
//!   above-threshold scan, and non-private stationarity certification.
//! - [`expmech`]: sampling from the regularized Gibbs density through
//!   alternating Gaussian steps with an exact inner rejection sampler.
//! - [`packing`]: grid covering of the domain and the discrete
//!   exponential mechanism over it.
//! - [`harness`]: seeded, reproducible experiment runner with CSV/JSON/SVG
//!   reports.

pub mod expmech;
pub mod harness;
pub mod linalg;
pub mod objective;
pub mod oracle;
pub mod packing;
pub mod privacy;
pub mod select;
pub mod spider;

pub use objective::{make_problem, problem_constants, Dataset, ObjectiveSpec, Problem, ProblemKind};
pub use privacy::{Budget, Ledger, MechanismCost};
