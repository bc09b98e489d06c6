use std::path::Path;
use std::process::Command;

use proptest::prelude::*;
use visiopath_cli::manifest::parse_seeds;
use visiopath_cli::plot::{aggregate_traces, emit_plot_data};
use visiopath_cli::run::{run, AGGREGATE_FILE};
use visiopath_cli::trace::metrics_file_name;
use visiopath_cli::{Method, RunManifest};
use visiopath_sim::ScenarioConfig;

fn scenarios_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn shipped_scenarios_match_presets() {
    let presets = [
        ("medium.toml", ScenarioConfig::medium_density()),
        ("high.toml", ScenarioConfig::high_density()),
        ("slow_leader.toml", ScenarioConfig::slow_leader()),
        ("cut_in.toml", ScenarioConfig::cut_in()),
    ];
    for (file, preset) in presets {
        let loaded = ScenarioConfig::load(&scenarios_dir().join(file)).unwrap();
        assert_eq!(loaded, preset, "{file}");
        assert_eq!(ScenarioConfig::from_toml(&preset.to_toml().unwrap()).unwrap(), preset);
    }
}

#[test]
fn plot_data_from_empty_directory_has_headers_only() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("plots");
    let s = emit_plot_data(tmp.path(), &out).unwrap();
    assert_eq!((s.traces, s.episodes, s.headway_samples), (0, 0, 0));
    for file in ["travel_times.csv", "speed_profiles.csv"] {
        let (header, rows) = read_csv(&out.join(file));
        assert!(!header.is_empty());
        assert!(rows.is_empty(), "{file}");
    }
    let (_, hist) = read_csv(&out.join("headway_histogram.csv"));
    assert_eq!(hist.len(), 21);
    assert!(hist.iter().all(|r| r[2] == "0"));
}

#[test]
fn plot_data_and_aggregate_agree_with_run_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let manifest = RunManifest {
        scenario: scenarios_dir().join("slow_leader.toml"),
        method: Method::MpcRefInit,
        safety: true,
        seeds: vec![0, 1],
        out: runs.clone(),
    };
    let row = run(&manifest).unwrap();

    // The aggregate recomputed from traces reproduces the table written by the run.
    let rows = aggregate_traces(&runs).unwrap();
    assert_eq!(rows, vec![row]);
    let table = std::fs::read_to_string(runs.join(AGGREGATE_FILE)).unwrap();
    assert_eq!(visiopath_cli::aggregate::render_table(&rows).unwrap(), table);

    let plots = tmp.path().join("plots");
    let summary = emit_plot_data(&runs, &plots).unwrap();
    assert_eq!(summary.traces, 2);

    let (_, hist) = read_csv(&plots.join("headway_histogram.csv"));
    let total: usize = hist.iter().map(|r| r[2].parse::<usize>().unwrap()).sum();
    assert_eq!(total, summary.headway_samples);
    assert!(total > 0);

    // Travel times in the plot table equal the per-seed metrics files.
    let (header, travel) = read_csv(&plots.join("travel_times.csv"));
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    assert_eq!(travel.len(), summary.episodes);
    for seed in [0u64, 1] {
        let text = std::fs::read_to_string(runs.join(metrics_file_name(seed))).unwrap();
        let metrics: serde_json::Value = serde_json::from_str(&text).unwrap();
        let expected: Vec<Option<f64>> = metrics["episodes"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["travel_time"].as_f64())
            .collect();
        let got: Vec<Option<f64>> = travel
            .iter()
            .filter(|r| r[col("seed")] == seed.to_string())
            .map(|r| r[col("travel_time_s")].parse().ok())
            .collect();
        assert_eq!(got, expected, "seed {seed}");
    }
}

#[test]
fn binary_runs_and_verifies_a_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_visiopath");
    let status = Command::new(exe)
        .args(["run", "--method", "mpc-ref-init", "--safety", "on", "--seeds", "0"])
        .arg("--scenario")
        .arg(scenarios_dir().join("slow_leader.toml"))
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let stdout = String::from_utf8(status.stdout).unwrap();
    assert!(stdout.starts_with("method,safety,seeds"));

    let verify = Command::new(exe)
        .arg("verify")
        .arg("--trace")
        .arg(tmp.path().join("trace_seed0.jsonl"))
        .output()
        .unwrap();
    assert!(verify.status.success());
    assert!(String::from_utf8(verify.stdout).unwrap().contains("0 unsafe"));

    let bad = Command::new(exe).args(["run", "--method", "nope"]).output().unwrap();
    assert!(!bad.status.success());
}

proptest! {
    #[test]
    fn seed_lists_round_trip(seeds in proptest::collection::vec(0u64..1_000_000, 1..20)) {
        let text = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        prop_assert_eq!(parse_seeds(&text).unwrap(), seeds);
    }

    #[test]
    fn seed_ranges_expand_inclusively(a in 0u64..1000, len in 0u64..50) {
        let got = parse_seeds(&format!("{a}..={}", a + len)).unwrap();
        prop_assert_eq!(got, (a..=a + len).collect::<Vec<_>>());
    }
}
