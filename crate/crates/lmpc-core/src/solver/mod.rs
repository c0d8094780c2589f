//! The embedded optimization stack: a dense operator-splitting QP solver and
//! the real-time-iteration SQP loop that drives it once per control step.

mod ocp;
mod qp;

pub use ocp::{solve_ocp, SolverFailure, SqpConfig};
pub use qp::{solve_qp, solve_qp_warm, QpInstance, QpSettings, QpSolution, QpStatus};
