//! JSON-lines run traces: one header line, then one line per control cycle.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use visiopath_core::mpc::MpcConfig;
use visiopath_sim::{CycleRecord, ScenarioConfig};

use crate::manifest::Method;
use crate::CliError;

pub const TRACE_FORMAT: &str = "visiopath-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    pub method: Method,
    pub safety: bool,
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub planner: MpcConfig,
}

impl TraceHeader {
    pub fn new(method: Method, safety: bool, seed: u64, scenario: ScenarioConfig, planner: MpcConfig) -> Self {
        Self {
            format: TRACE_FORMAT.into(),
            version: TRACE_VERSION,
            method,
            safety,
            seed,
            scenario,
            planner,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine {
    Header(Box<TraceHeader>),
    Cycle(Box<CycleRecord>),
}

pub fn write_trace(path: &Path, header: &TraceHeader, records: &[CycleRecord]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut line = |l: &TraceLine| -> Result<(), CliError> {
        serde_json::to_writer(&mut w, l).map_err(|e| CliError::Trace(e.to_string()))?;
        w.write_all(b"\n").map_err(io)
    };
    line(&TraceLine::Header(Box::new(header.clone())))?;
    for r in records {
        line(&TraceLine::Cycle(Box::new(r.clone())))?;
    }
    w.flush().map_err(io)
}

pub fn read_trace(path: &Path) -> Result<(TraceHeader, Vec<CycleRecord>), CliError> {
    let file = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let at = |msg: String| CliError::Trace(format!("{}:{}: {msg}", path.display(), i + 1));
        let line = line.map_err(|e| at(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceLine>(&line).map_err(|e| at(e.to_string()))? {
            TraceLine::Header(h) if i == 0 => {
                if h.format != TRACE_FORMAT || h.version != TRACE_VERSION {
                    return Err(at(format!("unsupported trace format {} v{}", h.format, h.version)));
                }
                header = Some(*h);
            }
            TraceLine::Header(_) => return Err(at("header after the first line".into())),
            TraceLine::Cycle(_) if header.is_none() => return Err(at("trace does not start with a header".into())),
            TraceLine::Cycle(r) => records.push(*r),
        }
    }
    let header = header.ok_or_else(|| CliError::Trace(format!("{}: empty trace", path.display())))?;
    Ok((header, records))
}

pub fn trace_file_name(seed: u64) -> String {
    format!("trace_seed{seed}.jsonl")
}

pub fn metrics_file_name(seed: u64) -> String {
    format!("metrics_seed{seed}.json")
}
