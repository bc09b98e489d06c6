//! Executes a manifest: one closed-loop run per seed, then the aggregate table.

use std::path::Path;

use serde::Serialize;
use visiopath_core::perception::ObservationProvider;
use visiopath_sim::{RunOutput, ScenarioConfig, Simulation};

use crate::aggregate::{aggregate, write_table, AggregateRow, RunStats};
use crate::manifest::{Method, RunManifest};
use crate::trace::{metrics_file_name, trace_file_name, write_trace, TraceHeader};
use crate::CliError;

pub const AGGREGATE_FILE: &str = "aggregate.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub header: TraceHeader,
    pub output: RunOutput,
    pub stats: RunStats,
}

/// External endpoint provider for the reference-initialized method, when configured.
fn external_provider(method: Method, scenario: &ScenarioConfig) -> Result<Option<Box<dyn ObservationProvider>>, CliError> {
    use visiopath_core::perception::ENDPOINT_URL_VAR;
    if method != Method::MpcRefInit || std::env::var_os(ENDPOINT_URL_VAR).is_none() {
        return Ok(None);
    }
    #[cfg(feature = "http")]
    {
        use visiopath_core::perception::{ExternalProvider, HttpEndpoint};
        let endpoint = HttpEndpoint::from_env(std::time::Duration::from_secs(5)).map_err(|e| CliError::Config(e.to_string()))?;
        let road = scenario.road_geometry().map_err(|e| CliError::Config(e.to_string()))?;
        let provider = ExternalProvider::new(endpoint, road, scenario.dt).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Some(Box::new(provider)))
    }
    #[cfg(not(feature = "http"))]
    {
        let _ = scenario;
        Err(CliError::Config(format!(
            "{ENDPOINT_URL_VAR} is set but this build lacks the http feature"
        )))
    }
}

/// Runs one seed of `scenario` with the preset for `method`.
pub fn run_seed(scenario: &ScenarioConfig, method: Method, safety: bool, seed: u64) -> Result<SeedRun, CliError> {
    let mut scenario = scenario.clone();
    scenario.seed = seed;
    let mut sim = Simulation::new(scenario.clone(), &method.planner_config(safety)).map_err(|e| CliError::Sim(e.to_string()))?;
    if let Some(p) = external_provider(method, &scenario)? {
        sim = sim.with_provider(p);
    }
    let header = TraceHeader::new(method, safety, seed, scenario.clone(), sim.mpc.clone());
    let output = sim.run().map_err(|e| CliError::Sim(format!("seed {seed}: {e}")))?;
    let stats = RunStats::from_records(seed, &output.records, &scenario);
    Ok(SeedRun { header, output, stats })
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    method: Method,
    safety: bool,
    spawned: usize,
    suppressed_spawns: usize,
    #[serde(flatten)]
    stats: &'a RunStats,
}

/// Runs every seed (in parallel), writes the per-seed trace and metrics files
/// and the aggregate table, and returns the table row.
pub fn run(manifest: &RunManifest) -> Result<AggregateRow, CliError> {
    manifest.validate()?;
    let scenario = ScenarioConfig::load(&manifest.scenario).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::create_dir_all(&manifest.out).map_err(|e| CliError::Io(format!("{}: {e}", manifest.out.display())))?;

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut stats = Vec::with_capacity(manifest.seeds.len());
    for chunk in manifest.seeds.chunks(workers) {
        let results: Vec<Result<SeedRun, CliError>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| {
                    let scenario = &scenario;
                    s.spawn(move || run_seed(scenario, manifest.method, manifest.safety, seed))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Sim("run panicked".into()))))
                .collect()
        });
        for result in results {
            let run = result?;
            write_seed(&manifest.out, &run)?;
            stats.push(run.stats);
        }
    }
    let row = aggregate(manifest.method, manifest.safety, &stats);
    write_table(&manifest.out.join(AGGREGATE_FILE), std::slice::from_ref(&row))?;
    Ok(row)
}

fn write_seed(out: &Path, run: &SeedRun) -> Result<(), CliError> {
    let seed = run.header.seed;
    write_trace(&out.join(trace_file_name(seed)), &run.header, &run.output.records)?;
    let metrics = MetricsFile {
        method: run.header.method,
        safety: run.header.safety,
        spawned: run.output.spawned,
        suppressed_spawns: run.output.suppressed_spawns,
        stats: &run.stats,
    };
    let path = out.join(metrics_file_name(seed));
    let text = serde_json::to_string_pretty(&metrics).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
