//! Columnar plot data derived from run traces.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::aggregate::{aggregate, AggregateRow, RunStats};
use crate::manifest::Method;
use crate::trace::{read_trace, TraceHeader};
use crate::CliError;

pub const HEADWAY_BIN_WIDTH: f64 = 0.5;
/// Bins cover `[0, HEADWAY_BIN_COUNT * width)`; the last row collects everything above.
pub const HEADWAY_BIN_COUNT: usize = 20;

pub const TRAVEL_TIMES_FILE: &str = "travel_times.csv";
pub const HEADWAY_FILE: &str = "headway_histogram.csv";
pub const SPEED_FILE: &str = "speed_profiles.csv";

/// Trace files (`*.jsonl`) in `dir`, sorted by name.
pub fn trace_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every trace in `dir` and reduces it to run statistics, ordered by seed.
pub fn load_runs(dir: &Path) -> Result<Vec<(TraceHeader, RunStats, Vec<visiopath_sim::CycleRecord>)>, CliError> {
    let mut out = Vec::new();
    for path in trace_files(dir)? {
        let (header, records) = read_trace(&path)?;
        let stats = RunStats::from_records(header.seed, &records, &header.scenario);
        out.push((header, stats, records));
    }
    out.sort_by_key(|(h, _, _)| (h.method, h.safety, h.seed));
    Ok(out)
}

/// Recomputes the aggregate table rows, one per (method, safety) pair.
pub fn aggregate_traces(dir: &Path) -> Result<Vec<AggregateRow>, CliError> {
    let mut groups: BTreeMap<(Method, bool), Vec<RunStats>> = BTreeMap::new();
    for (h, stats, _) in load_runs(dir)? {
        groups.entry((h.method, h.safety)).or_default().push(stats);
    }
    Ok(groups
        .into_iter()
        .map(|((method, safety), runs)| aggregate(method, safety, &runs))
        .collect())
}

pub fn headway_histogram(samples: &[f64]) -> Vec<(f64, f64, usize)> {
    let mut counts = vec![0usize; HEADWAY_BIN_COUNT + 1];
    for &h in samples {
        let bin = ((h / HEADWAY_BIN_WIDTH).floor().max(0.0) as usize).min(HEADWAY_BIN_COUNT);
        counts[bin] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let lo = i as f64 * HEADWAY_BIN_WIDTH;
            let hi = if i == HEADWAY_BIN_COUNT {
                f64::INFINITY
            } else {
                lo + HEADWAY_BIN_WIDTH
            };
            (lo, hi, c)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlotSummary {
    pub traces: usize,
    pub episodes: usize,
    pub headway_samples: usize,
}

/// Writes travel times, the time-headway histogram and per-cycle speed profiles.
pub fn emit_plot_data(traces_dir: &Path, out_dir: &Path) -> Result<PlotSummary, CliError> {
    let runs = load_runs(traces_dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Io(format!("{}: {e}", out_dir.display())))?;
    let csv_err = |e: csv::Error| CliError::Io(e.to_string());
    let open = |name: &str| csv::Writer::from_path(out_dir.join(name)).map_err(csv_err);

    let mut travel = open(TRAVEL_TIMES_FILE)?;
    travel
        .write_record([
            "method",
            "safety",
            "seed",
            "episode",
            "travel_time_s",
            "mean_speed_mps",
            "collided",
            "partial",
        ])
        .map_err(csv_err)?;
    let mut speed = open(SPEED_FILE)?;
    speed
        .write_record([
            "method",
            "safety",
            "seed",
            "episode",
            "time_s",
            "progress_m",
            "speed_mps",
            "desired_speed_mps",
        ])
        .map_err(csv_err)?;

    let mut headways = Vec::new();
    let mut episodes = 0;
    for (h, stats, records) in &runs {
        let safety = if h.safety { "on" } else { "off" };
        for e in &stats.episodes {
            episodes += 1;
            headways.extend_from_slice(&e.time_headways);
            travel
                .write_record([
                    h.method.to_string(),
                    safety.to_string(),
                    h.seed.to_string(),
                    e.episode.to_string(),
                    e.travel_time.map_or_else(String::new, |t| t.to_string()),
                    e.mean_speed.to_string(),
                    e.collided.to_string(),
                    e.partial.to_string(),
                ])
                .map_err(csv_err)?;
        }
        for r in records.iter().filter(|r| r.time >= h.scenario.warmup - 1e-9) {
            speed
                .write_record([
                    h.method.to_string(),
                    safety.to_string(),
                    h.seed.to_string(),
                    r.episode.to_string(),
                    r.time.to_string(),
                    r.progress.to_string(),
                    r.ego.vx.to_string(),
                    r.telemetry.desired_speed.to_string(),
                ])
                .map_err(csv_err)?;
        }
    }
    travel.flush().map_err(|e| CliError::Io(e.to_string()))?;
    speed.flush().map_err(|e| CliError::Io(e.to_string()))?;

    let mut hist = open(HEADWAY_FILE)?;
    hist.write_record(["bin_lower_s", "bin_upper_s", "count"]).map_err(csv_err)?;
    for (lo, hi, c) in headway_histogram(&headways) {
        hist.write_record([lo.to_string(), hi.to_string(), c.to_string()])
            .map_err(csv_err)?;
    }
    hist.flush().map_err(|e| CliError::Io(e.to_string()))?;

    Ok(PlotSummary {
        traces: runs.len(),
        episodes,
        headway_samples: headways.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_conserves_samples() {
        let samples = [0.0, 0.49, 0.5, 1.7, 9.99, 10.0, 55.0, 3.2];
        let h = headway_histogram(&samples);
        assert_eq!(h.len(), HEADWAY_BIN_COUNT + 1);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), samples.len());
        assert_eq!(h[0].2, 2);
        assert_eq!(h[1].2, 1);
        assert_eq!(h[HEADWAY_BIN_COUNT].2, 2);
        assert!(h[HEADWAY_BIN_COUNT].1.is_infinite());
    }
}
