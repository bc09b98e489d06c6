//! Per-seed run statistics and the cross-seed aggregate table.

use std::path::Path;

use serde::{Deserialize, Serialize};
use visiopath_sim::metrics::mean;
use visiopath_sim::{collect_metrics, CycleRecord, MetricsSummary, ScenarioConfig};

use crate::manifest::Method;
use crate::CliError;

/// What one seeded run contributes to the aggregate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub seed: u64,
    pub cycles: usize,
    pub replans: usize,
    pub solver_calls: usize,
    pub solver_iterations: usize,
    pub episodes: Vec<MetricsSummary>,
}

impl RunStats {
    pub fn from_records(seed: u64, records: &[CycleRecord], scenario: &ScenarioConfig) -> Self {
        let kept = records.iter().filter(|r| r.time >= scenario.warmup - 1e-9);
        let (mut cycles, mut replans, mut calls, mut iterations) = (0, 0, 0, 0);
        for r in kept {
            cycles += 1;
            replans += usize::from(r.telemetry.replanned);
            calls += r.telemetry.solver_calls;
            iterations += r.telemetry.iterations;
        }
        Self {
            seed,
            cycles,
            replans,
            solver_calls: calls,
            solver_iterations: iterations,
            episodes: collect_metrics(records, scenario.ego.segment, scenario.dt, scenario.warmup),
        }
    }
}

/// Aggregate over the finished (completed or collided) episodes of all seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub safety: bool,
    pub seeds: usize,
    pub episodes: usize,
    pub completed: usize,
    pub collided: usize,
    pub collision_rate: Option<f64>,
    pub mean_travel_time: Option<f64>,
    pub mean_speed: Option<f64>,
    pub mean_time_headway: Option<f64>,
    pub mean_distance_headway: Option<f64>,
    pub mean_dangerous_incidents: Option<f64>,
    pub solver_calls: usize,
    pub mean_iterations: Option<f64>,
}

pub const AGGREGATE_HEADER: [&str; 14] = [
    "method",
    "safety",
    "seeds",
    "episodes",
    "completed",
    "collided",
    "collision_rate",
    "mean_travel_time_s",
    "mean_speed_mps",
    "mean_time_headway_s",
    "mean_distance_headway_m",
    "mean_dangerous_incidents",
    "solver_calls",
    "mean_iterations",
];

pub fn aggregate(method: Method, safety: bool, runs: &[RunStats]) -> AggregateRow {
    let finished: Vec<&MetricsSummary> = runs.iter().flat_map(|r| &r.episodes).filter(|e| !e.partial).collect();
    let completed: Vec<&MetricsSummary> = finished.iter().copied().filter(|e| e.travel_time.is_some()).collect();
    let collided = finished.iter().filter(|e| e.collided).count();
    let travel: Vec<f64> = completed.iter().filter_map(|e| e.travel_time).collect();
    let speeds: Vec<f64> = completed.iter().map(|e| e.mean_speed).collect();
    let th: Vec<f64> = finished.iter().flat_map(|e| e.time_headways.iter().copied()).collect();
    let dh: Vec<f64> = finished.iter().flat_map(|e| e.distance_headways.iter().copied()).collect();
    let incidents: Vec<f64> = finished.iter().map(|e| e.dangerous_incidents as f64).collect();
    let solver_calls: usize = runs.iter().map(|r| r.solver_calls).sum();
    let iterations: usize = runs.iter().map(|r| r.solver_iterations).sum();
    AggregateRow {
        method,
        safety,
        seeds: runs.len(),
        episodes: finished.len(),
        completed: completed.len(),
        collided,
        collision_rate: (!finished.is_empty()).then(|| collided as f64 / finished.len() as f64),
        mean_travel_time: mean(&travel),
        mean_speed: mean(&speeds),
        mean_time_headway: mean(&th),
        mean_distance_headway: mean(&dh),
        mean_dangerous_incidents: mean(&incidents),
        solver_calls,
        mean_iterations: (solver_calls > 0).then(|| iterations as f64 / solver_calls as f64),
    }
}

fn fixed(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.3}"))
}

impl AggregateRow {
    /// Table cells in [`AGGREGATE_HEADER`] order, reals with three decimals.
    pub fn cells(&self) -> Vec<String> {
        vec![
            self.method.to_string(),
            if self.safety { "on" } else { "off" }.to_string(),
            self.seeds.to_string(),
            self.episodes.to_string(),
            self.completed.to_string(),
            self.collided.to_string(),
            fixed(self.collision_rate),
            fixed(self.mean_travel_time),
            fixed(self.mean_speed),
            fixed(self.mean_time_headway),
            fixed(self.mean_distance_headway),
            fixed(self.mean_dangerous_incidents),
            self.solver_calls.to_string(),
            fixed(self.mean_iterations),
        ]
    }
}

pub fn render_table(rows: &[AggregateRow]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(AGGREGATE_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.cells()).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Io(e.to_string()))
}

pub fn write_table(path: &Path, rows: &[AggregateRow]) -> Result<(), CliError> {
    std::fs::write(path, render_table(rows)?).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode(collided: bool, travel_time: Option<f64>) -> MetricsSummary {
        MetricsSummary {
            episode: 0,
            ego_id: 1,
            cycles: 10,
            travel_time,
            mean_speed: travel_time.map_or(10.0, |t| 2000.0 / t),
            distance: 100.0,
            time_headways: vec![2.0],
            distance_headways: vec![40.0],
            collided,
            dangerous_incidents: usize::from(collided),
            partial: !collided && travel_time.is_none(),
        }
    }

    fn run(seed: u64, e: MetricsSummary) -> RunStats {
        RunStats {
            seed,
            cycles: 10,
            replans: 2,
            solver_calls: 2,
            solver_iterations: 6,
            episodes: vec![e],
        }
    }

    #[test]
    fn two_of_seven_collided() {
        let runs: Vec<RunStats> = (0..7)
            .map(|s| run(s, if s < 2 { episode(true, None) } else { episode(false, Some(100.0)) }))
            .collect();
        let row = aggregate(Method::MpcZeroInit, false, &runs);
        assert_eq!((row.episodes, row.collided, row.completed), (7, 2, 5));
        assert_eq!(row.cells()[6], "0.286");
        assert_eq!(row.cells()[7], "100.000");
        assert_eq!(row.cells()[13], "3.000");
    }

    #[test]
    fn safe_runs_report_zero_rate_and_partials_are_excluded() {
        let runs = vec![run(0, episode(false, Some(120.0))), run(1, episode(false, None))];
        let row = aggregate(Method::MpcRefInit, true, &runs);
        assert_eq!(row.episodes, 1);
        assert_eq!(row.cells()[6], "0.000");
        let table = render_table(&[row]).unwrap();
        assert!(table.starts_with("method,safety,seeds"));
        assert_eq!(table.lines().count(), 2);
    }

    #[test]
    fn empty_runs_render_nan() {
        let row = aggregate(Method::MpcRefInit, true, &[]);
        assert_eq!(row.cells()[6], "nan");
    }
}
