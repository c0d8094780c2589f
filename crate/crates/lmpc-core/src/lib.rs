//! Learning model predictive control for simulated autonomous racing.
//!
//! The crate is organized around the control pipeline:
//!
//! * [`track`] — piecewise-constant-curvature race tracks and exact
//!   Cartesian/Frenet transforms,
//! * [`models`] — kinematic and dynamic bicycle models plus the
//!   regression-parameterized model used inside the controller,
//! * [`sysid`] — online least-squares identification of the yaw/velocity
//!   dynamics,
//! * [`safeset`] — storage of completed laps, cost-to-go bookkeeping and
//!   local terminal-set selection,
//! * [`controllers`] — assembly of the path-following, single-agent and
//!   multi-agent optimal-control problems,
//! * [`solver`] — a self-contained operator-splitting QP solver and the
//!   real-time-iteration SQP wrapper around it,
//! * [`estimation`] — a dual-model extended Kalman filter over simulated
//!   sensors and cornering-stiffness identification,
//! * [`sim`] — the plant simulation and the race orchestration loops.

pub mod controllers;
pub mod estimation;
pub mod models;
pub mod safeset;
pub mod sim;
pub mod solver;
pub mod sysid;
pub mod track;

pub use controllers::{ControllerConfig, OcpProblem, OcpSolution, RaceConfig};
pub use models::{
    KinematicState, PacejkaParams, VehicleInput, VehicleParams, VehicleState,
};
pub use safeset::{IterationRecord, LocalSafeSet, SafeSetConfig, SafeSetStore};
pub use sim::{RaceLog, SimConfig};
pub use solver::{QpInstance, QpSolution, QpStatus};
pub use sysid::{RegressionModel, SysIdConfig};
pub use track::{CurvatureSegment, Track};
