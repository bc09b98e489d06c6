//! Batch harness around the simulator: manifests, traces, aggregate tables,
//! plot data and offline verification.

pub mod aggregate;
pub mod manifest;
pub mod plot;
pub mod run;
pub mod trace;
pub mod verify;

use thiserror::Error;

pub use manifest::{Method, RunManifest};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CliError {
    #[error("{0}")]
    Manifest(String),
    #[error("{0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("simulation failed: {0}")]
    Sim(String),
    #[error("trace error: {0}")]
    Trace(String),
}
