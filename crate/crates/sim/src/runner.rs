//! Closed-loop run: traffic, perception, the receding-horizon coordinator and the ego.

use visiopath_core::mpc::{Coordinator, MpcConfig};
use visiopath_core::perception::{GroundTruthProvider, NoisyProvider, ObservationProvider};

use crate::metrics::{collect_metrics, CycleRecord, LeaderSample, MetricsSummary};
use crate::scenario::{PerceptionConfig, ScenarioConfig};
use crate::world::World;
use crate::SimError;

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<CycleRecord>,
    pub episodes: Vec<MetricsSummary>,
    pub spawned: usize,
    pub suppressed_spawns: usize,
}

pub struct Simulation {
    pub scenario: ScenarioConfig,
    pub mpc: MpcConfig,
    provider: Box<dyn ObservationProvider>,
}

/// Aligns the planner configuration with the scenario's road, ego and sampling period.
pub fn planner_config(scenario: &ScenarioConfig, base: &MpcConfig) -> Result<MpcConfig, SimError> {
    let mut c = base.clone();
    c.road = scenario.road_geometry()?;
    c.params.length = scenario.ego.length;
    c.params.width = scenario.ego.width;
    c.params.dt = scenario.dt;
    c.safety.dt = scenario.dt;
    c.speed.v_nominal = scenario.ego.nominal_speed;
    c.validate().map_err(|e| SimError::Mpc(e.to_string()))?;
    Ok(c)
}

/// Provider selected by the scenario's perception section.
pub fn default_provider(scenario: &ScenarioConfig) -> Result<Box<dyn ObservationProvider>, SimError> {
    let road = scenario.road_geometry()?;
    Ok(match scenario.perception {
        PerceptionConfig::GroundTruth => Box::new(GroundTruthProvider {
            road,
            range: scenario.sensing_range,
        }),
        PerceptionConfig::Noisy { sigma_pos, sigma_dim } => Box::new(
            NoisyProvider::new(road, scenario.sensing_range, scenario.dt, scenario.seed, sigma_pos, sigma_dim)
                .map_err(|e| SimError::Perception(e.to_string()))?,
        ),
    })
}

impl Simulation {
    pub fn new(scenario: ScenarioConfig, mpc: &MpcConfig) -> Result<Self, SimError> {
        scenario.validate()?;
        let mpc = planner_config(&scenario, mpc)?;
        let provider = default_provider(&scenario)?;
        Ok(Self { scenario, mpc, provider })
    }

    pub fn with_provider(mut self, provider: Box<dyn ObservationProvider>) -> Self {
        self.provider = provider;
        self
    }

    pub fn run(mut self) -> Result<RunOutput, SimError> {
        let sc = self.scenario.clone();
        let dt = sc.dt;
        let mut world = World::new(&sc)?;
        let steps = ((sc.duration + TIME_EPS) / dt).floor() as u64;
        let mut scripts = sc.scripted.clone();
        scripts.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut next_script = 0;

        let mut records = Vec::new();
        let mut episode = 0usize;
        let mut first_ego_time: Option<f64> = None;
        let mut coordinator: Option<Coordinator> = None;
        let mut start_x = 0.0;

        for k in 0..steps {
            world.time = k as f64 * dt;
            let now = world.time;
            world.spawn_traffic();

            let episodes_left = sc.max_episodes.is_none_or(|m| episode < m);
            if world.ego.is_none() && now >= sc.warmup - TIME_EPS && episodes_left {
                if let Some(id) = world.insert_ego() {
                    coordinator = Some(Coordinator::new(self.mpc.clone()).map_err(|e| SimError::Mpc(e.to_string()))?);
                    start_x = world.vehicles[&id].state.x;
                    first_ego_time.get_or_insert(now);
                }
            }
            if !episodes_left && world.ego.is_none() {
                break;
            }
            if let Some(t0) = first_ego_time {
                while next_script < scripts.len() && t0 + scripts[next_script].time <= now + TIME_EPS {
                    world.spawn_scripted(&scripts[next_script])?;
                    next_script += 1;
                }
            }

            let Some(ego_id) = world.ego else {
                world.advance_traffic(dt);
                continue;
            };
            let ego = world.vehicles[&ego_id].state;
            let observations = self
                .provider
                .observe(&world.snapshot())
                .map_err(|e| SimError::Perception(e.to_string()))?;
            let reference = self.provider.reference();
            let coord = coordinator.as_mut().expect("coordinator exists while an ego is present");
            let out = coord
                .cycle(now, &ego, &observations, reference.as_deref())
                .map_err(|e| SimError::Mpc(e.to_string()))?;
            let leader = world
                .leader_of(ego_id)
                .filter(|(_, d, _)| *d <= sc.sensing_range)
                .map(|(id, distance, speed)| LeaderSample { id, distance, speed });
            let ego_after = world.actuate_ego(&out.control, self.mpc.speed.command_delta)?;
            world.advance_traffic(dt);

            let collision = world.ego_collision();
            let progress = ego_after.x - start_x;
            let completed = progress >= sc.ego.segment;
            records.push(CycleRecord {
                time: now,
                episode,
                ego_id,
                ego,
                ego_after,
                progress,
                observations,
                leader,
                telemetry: out.telemetry,
                collision,
                completed,
            });
            if collision.is_some() || completed {
                world.remove_ego();
                coordinator = None;
                episode += 1;
            }
        }

        let episodes = collect_metrics(&records, sc.ego.segment, dt, sc.warmup);
        Ok(RunOutput {
            records,
            episodes,
            spawned: world.spawn_log.len(),
            suppressed_spawns: world.suppressed_spawns,
        })
    }
}
