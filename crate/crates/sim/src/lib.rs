//! Deterministic multilane traffic simulator that closes the loop around the
//! planner and collects travel-time, headway and safety metrics.

pub mod metrics;
pub mod runner;
pub mod scenario;
pub mod world;

use thiserror::Error;

pub use metrics::{collect_metrics, CycleRecord, MetricsSummary};
pub use runner::{RunOutput, Simulation};
pub use scenario::ScenarioConfig;
pub use world::World;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("actuation rejected: {0}")]
    Actuation(String),
    #[error("planner error: {0}")]
    Mpc(String),
    #[error("perception error: {0}")]
    Perception(String),
}
