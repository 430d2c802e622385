//! Sparse linear algebra and a primal-dual interior-point solver for
//! quadratically constrained programs.

pub mod check;
pub mod ipm;
pub mod ldl;
pub mod lu;
pub mod ordering;
pub mod problem;
pub mod sparse;

pub use check::{check_derivatives, Differentiable};
pub use ipm::{solve, write_iteration_log, Initialization, IterationRecord, SolveOutcome, SolveStatus, SolverError, SolverOptions};
pub use ldl::{Inertia, Ldl, LdlError};
pub use lu::{LuError, SparseLu};
pub use problem::{Compiled, Constraint, Expr, ProblemError, QcqpProblem};
pub use sparse::CscMatrix;
