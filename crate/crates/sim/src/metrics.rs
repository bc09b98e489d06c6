//! Per-cycle run records and per-episode summaries.

use serde::{Deserialize, Serialize};
use visiopath_core::mpc::CycleTelemetry;
use visiopath_core::{ObservationSet, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeaderSample {
    pub id: u64,
    /// Center-to-center distance (m).
    pub distance: f64,
    pub speed: f64,
}

/// Everything recorded for one control cycle of an ego episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub time: f64,
    pub episode: usize,
    pub ego_id: u64,
    /// Ego state when the cycle started.
    pub ego: VehicleState,
    /// Ego state after the control was applied.
    pub ego_after: VehicleState,
    /// Distance covered in this episode after the control was applied (m).
    pub progress: f64,
    pub observations: ObservationSet,
    pub leader: Option<LeaderSample>,
    pub telemetry: CycleTelemetry,
    /// Vehicle hit by the ego at the end of the cycle.
    pub collision: Option<u64>,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub episode: usize,
    pub ego_id: u64,
    pub cycles: usize,
    /// Time to cover the segment, interpolated at the crossing (s).
    pub travel_time: Option<f64>,
    pub mean_speed: f64,
    pub distance: f64,
    pub time_headways: Vec<f64>,
    pub distance_headways: Vec<f64>,
    pub collided: bool,
    pub dangerous_incidents: usize,
    /// Episode ended neither by completion nor by collision.
    pub partial: bool,
}

impl MetricsSummary {
    pub fn mean_time_headway(&self) -> Option<f64> {
        mean(&self.time_headways)
    }

    pub fn mean_distance_headway(&self) -> Option<f64> {
        mean(&self.distance_headways)
    }
}

pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Speeds below this are excluded from time headway (m/s).
const MIN_HEADWAY_SPEED: f64 = 0.1;

/// Summarizes the records of each episode. Cycles before `warmup` are ignored.
pub fn collect_metrics(records: &[CycleRecord], segment: f64, dt: f64, warmup: f64) -> Vec<MetricsSummary> {
    let mut out: Vec<MetricsSummary> = Vec::new();
    let kept: Vec<&CycleRecord> = records.iter().filter(|r| r.time >= warmup - 1e-9).collect();
    let mut i = 0;
    while i < kept.len() {
        let episode = kept[i].episode;
        let j = kept[i..].iter().position(|r| r.episode != episode).map_or(kept.len(), |p| i + p);
        out.push(summarize(&kept[i..j], segment, dt));
        i = j;
    }
    out
}

fn summarize(records: &[&CycleRecord], segment: f64, dt: f64) -> MetricsSummary {
    let first = records[0];
    let last = records[records.len() - 1];
    let start = first.time;
    let travel_time = records.iter().find(|r| r.completed).map(|r| {
        let step = r.ego_after.x - r.ego.x;
        let before = r.progress - step;
        let frac = if step > 0.0 {
            ((segment - before) / step).clamp(0.0, 1.0)
        } else {
            1.0
        };
        r.time + frac * dt - start
    });
    let collided = records.iter().any(|r| r.collision.is_some());
    let distance = last.progress;
    let mean_speed = match travel_time {
        Some(t) => segment / t,
        None => distance / (last.time + dt - start),
    };
    let mut time_headways = Vec::new();
    let mut distance_headways = Vec::new();
    for r in records {
        if let Some(l) = r.leader {
            distance_headways.push(l.distance);
            if r.ego.vx > MIN_HEADWAY_SPEED {
                time_headways.push(l.distance / r.ego.vx);
            }
        }
    }
    MetricsSummary {
        episode: first.episode,
        ego_id: first.ego_id,
        cycles: records.len(),
        travel_time,
        mean_speed,
        distance,
        time_headways,
        distance_headways,
        collided,
        dangerous_incidents: records.iter().filter(|r| r.telemetry.high_risk).count(),
        partial: travel_time.is_none() && !collided,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use visiopath_core::mpc::TriggerFlags;
    use visiopath_core::ControlInput;

    fn telemetry(cycle: u64, time: f64) -> CycleTelemetry {
        CycleTelemetry {
            cycle,
            time,
            triggers: TriggerFlags::default(),
            suppressed: false,
            replanned: false,
            forced: false,
            init: None,
            solver_calls: 0,
            iterations: 0,
            solver_status: None,
            escalations: 0,
            emergency: false,
            unsafe_plan: false,
            high_risk: false,
            flagged: Vec::new(),
            desired_speed: 15.0,
            speed_command: 15.0,
            control: ControlInput::ZERO,
            plan: None,
        }
    }

    /// Constant-speed run from x = 0 until the segment is crossed.
    fn cruise(speed: f64, segment: f64, dt: f64) -> Vec<CycleRecord> {
        let mut out = Vec::new();
        let mut k = 0u64;
        loop {
            let x0 = speed * dt * k as f64;
            let x1 = speed * dt * (k + 1) as f64;
            out.push(CycleRecord {
                time: k as f64 * dt,
                episode: 0,
                ego_id: 1,
                ego: VehicleState::new(x0, 1.6, speed, 0.0),
                ego_after: VehicleState::new(x1, 1.6, speed, 0.0),
                progress: x1,
                observations: ObservationSet::default(),
                leader: None,
                telemetry: telemetry(k, k as f64 * dt),
                collision: None,
                completed: x1 >= segment,
            });
            if x1 >= segment {
                return out;
            }
            k += 1;
        }
    }

    #[test]
    fn constant_speed_travel_time() {
        let m = collect_metrics(&cruise(15.0, 2000.0, 0.1), 2000.0, 0.1, 0.0);
        assert_eq!(m.len(), 1);
        // Kinematic identity: 2000 m / 15 m/s.
        assert!((m[0].travel_time.unwrap() - 2000.0 / 15.0).abs() < 1e-9);
        assert!((m[0].travel_time.unwrap() - 133.33).abs() < 5e-3);
        assert!((m[0].mean_speed - 15.0).abs() < 1e-9);
        assert!(m[0].time_headways.is_empty() && m[0].distance_headways.is_empty());
        assert!(!m[0].collided && !m[0].partial);
        assert_eq!(m[0].dangerous_incidents, 0);
    }

    #[test]
    fn counts_high_risk_cycles_and_headways() {
        let mut r = cruise(15.0, 100.0, 0.1);
        r[3].telemetry.high_risk = true;
        r[5].leader = Some(LeaderSample {
            id: 9,
            distance: 30.0,
            speed: 14.0,
        });
        let m = &collect_metrics(&r, 100.0, 0.1, 0.0)[0];
        assert_eq!(m.dangerous_incidents, 1);
        assert_eq!(m.distance_headways, vec![30.0]);
        assert_eq!(m.time_headways, vec![2.0]);
    }

    #[test]
    fn partial_and_collided_episodes() {
        let mut r = cruise(10.0, 50.0, 0.1);
        r.truncate(10);
        let mut second = cruise(10.0, 50.0, 0.1);
        second.truncate(5);
        for s in &mut second {
            s.episode = 1;
            s.time += 5.0;
        }
        second[4].collision = Some(3);
        r.extend(second);
        let m = collect_metrics(&r, 50.0, 0.1, 0.0);
        assert_eq!(m.len(), 2);
        assert!(m[0].partial && !m[0].collided && m[0].travel_time.is_none());
        assert!((m[0].mean_speed - 10.0).abs() < 1e-9);
        assert!(m[1].collided && !m[1].partial);
    }

    #[test]
    fn warmup_cycles_are_ignored() {
        let r = cruise(15.0, 100.0, 0.1);
        let m = collect_metrics(&r, 100.0, 0.1, 2.0);
        assert_eq!(m[0].cycles, r.len() - 20);
    }
}
