//! Offline re-verification of the plans recorded in a trace.

use std::path::Path;

use serde::{Deserialize, Serialize};
use visiopath_core::safety::{self, Violation};

use crate::trace::read_trace;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFinding {
    pub cycle: u64,
    pub time: f64,
    pub episode: usize,
    pub unsafe_plan: bool,
    pub high_risk: bool,
    pub first_violation: Option<Violation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub cycles: usize,
    pub plans_checked: usize,
    /// Executed plans that fail the check, in trace order.
    pub findings: Vec<PlanFinding>,
    pub collisions: usize,
}

impl VerifyReport {
    pub fn unsafe_plans(&self) -> usize {
        self.findings.iter().filter(|f| f.unsafe_plan).count()
    }

    pub fn high_risk_plans(&self) -> usize {
        self.findings.iter().filter(|f| f.high_risk).count()
    }
}

/// Runs the safety check on every plan the trace records as executed, against
/// the observations of the same cycle and the planner settings in the header.
pub fn verify_trace(path: &Path) -> Result<VerifyReport, CliError> {
    let (header, records) = read_trace(path)?;
    let p = &header.planner;
    let mut findings = Vec::new();
    let mut plans_checked = 0;
    for r in &records {
        let Some(plan) = &r.telemetry.plan else {
            continue;
        };
        plans_checked += 1;
        let report = safety::verify(plan, &p.params, &r.observations.observations, &p.road, &p.safety)
            .map_err(|e| CliError::Trace(format!("cycle {}: {e}", r.telemetry.cycle)))?;
        if !report.is_safe() {
            findings.push(PlanFinding {
                cycle: r.telemetry.cycle,
                time: r.time,
                episode: r.episode,
                unsafe_plan: report.unsafe_plan,
                high_risk: report.high_risk,
                first_violation: report.first_violation,
            });
        }
    }
    Ok(VerifyReport {
        cycles: records.len(),
        plans_checked,
        findings,
        collisions: records.iter().filter(|r| r.collision.is_some()).count(),
    })
}
