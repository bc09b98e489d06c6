//! Run manifests and the planner presets behind each method name.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use visiopath_core::mpc::{InitStrategy, MpcConfig, TriggerMode};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Event-triggered replanning from zero controls.
    MpcZeroInit,
    /// Event-triggered replanning seeded from a reference path.
    MpcRefInit,
    /// Replanning every control period, warm-started from the previous plan.
    MpcFixedInterval,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::MpcZeroInit, Method::MpcRefInit, Method::MpcFixedInterval];

    pub fn name(&self) -> &'static str {
        match self {
            Method::MpcZeroInit => "mpc-zero-init",
            Method::MpcRefInit => "mpc-ref-init",
            Method::MpcFixedInterval => "mpc-fixed-interval",
        }
    }

    pub fn planner_config(&self, safety: bool) -> MpcConfig {
        let (trigger_mode, init) = match self {
            Method::MpcZeroInit => (TriggerMode::EventTriggered, InitStrategy::Zero),
            Method::MpcRefInit => (TriggerMode::EventTriggered, InitStrategy::Reference),
            Method::MpcFixedInterval => (TriggerMode::FixedInterval, InitStrategy::WarmStart),
        };
        MpcConfig {
            trigger_mode,
            init,
            safety_enabled: safety,
            ..MpcConfig::default()
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Method::ALL.iter().map(Method::name).collect();
            CliError::Manifest(format!("unknown method '{s}', expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: PathBuf,
    pub method: Method,
    pub safety: bool,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl RunManifest {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Manifest("at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Manifest("seeds must be distinct".into()));
        }
        Ok(())
    }
}

/// Parses `1,2,5` and inclusive ranges such as `0..=9` (mixable: `0..=3,7`).
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Manifest(format!("invalid seed list '{text}'"));
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..=") {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| bad())?;
                let b: u64 = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

pub fn parse_switch(text: &str) -> Result<bool, CliError> {
    match text {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(CliError::Manifest(format!("expected on or off, got '{text}'"))),
    }
}
