//! Trajectory planning for an automated vehicle on a straight multilane road.
//!
//! The stack is layered bottom-up:
//!
//! - [`dynamics`]: double-integrator vehicle model and state-dependent control bounds
//! - [`potential`]: elliptical repulsive potentials around surrounding vehicles
//! - [`ocp`]: finite-horizon stage cost and its derivatives
//! - [`ddp`]: box-constrained differential dynamic programming solver
//! - [`safety`]: post-optimization verification of planned trajectories
//! - [`perception`]: structured obstacle observations from interchangeable providers
//! - [`mpc`]: event-triggered receding-horizon coordinator tying everything together

pub mod ddp;
pub mod dynamics;
pub mod mpc;
pub mod ocp;
pub mod perception;
pub mod potential;
pub mod safety;

pub use ddp::{SolverConfig, SolverResult, SolverStatus};
pub use dynamics::{ControlBounds, ControlInput, RoadGeometry, VehicleParams, VehicleState};
pub use ocp::{CostWeights, OcpProblem};
pub use perception::{ObservationSet, ObstacleObservation};
pub use safety::{SafetyConfig, SafetyReport};
