//! Primal-dual interior-point solver for block semidefinite feasibility
//! problems.
//!
//! The solver embeds the problem in a homogeneous self-dual system so that a
//! single run ends with either a strictly feasible primal point or a dual ray
//! proving infeasibility, without a phase-one.

mod dump;
mod error;
mod linalg;
mod problem;
mod solver;

pub use dump::write_sparse;
pub use error::SdpError;
pub use linalg::{min_eigenvalue_check, EigenCheck};
pub use problem::{Constraint, PsdEntry, SdpProblem};
pub use solver::{solve_feasibility, SdpSolution, SolveStatus, SolverConfig};
