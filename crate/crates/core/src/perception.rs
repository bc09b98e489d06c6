//! Structured obstacle observations for the planner.
//!
//! Providers turn a [`SceneSnapshot`] into an [`ObservationSet`]: exact ground
//! truth, ground truth with Gaussian measurement noise, or responses from an
//! external model endpoint parsed from JSON records.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::RoadGeometry;

/// Maximum number of observations handed to the planner per frame.
pub const MAX_OBSERVATIONS: usize = 15;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerceptionError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("ego vehicle {0} not present in scene")]
    UnknownEgo(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleObservation {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub length: f64,
    pub width: f64,
    pub vx: f64,
    pub vy: f64,
    pub lane: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObservationSet {
    pub timestamp: f64,
    pub observations: Vec<ObstacleObservation>,
    /// Set when an external provider failed and the previous set was reused.
    #[serde(default)]
    pub fallback: bool,
}

impl ObservationSet {
    /// Keeps the [`MAX_OBSERVATIONS`] observations closest to `ego_x`
    /// longitudinally, nearest first (ties by id).
    pub fn nearest(timestamp: f64, ego_x: f64, mut observations: Vec<ObstacleObservation>) -> Self {
        observations.sort_by(|a, b| (a.x - ego_x).abs().total_cmp(&(b.x - ego_x).abs()).then(a.id.cmp(&b.id)));
        observations.truncate(MAX_OBSERVATIONS);
        Self {
            timestamp,
            observations,
            fallback: false,
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&ObstacleObservation> {
        self.observations.iter().find(|o| o.id == id)
    }
}

/// One vehicle as seen by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleSnapshot {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub length: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSnapshot {
    pub time: f64,
    pub ego_id: u64,
    /// All vehicles including the ego.
    pub vehicles: Vec<VehicleSnapshot>,
}

impl SceneSnapshot {
    pub fn ego(&self) -> Option<&VehicleSnapshot> {
        self.vehicles.iter().find(|v| v.id == self.ego_id)
    }
}

/// Reference path point at time offset `t` (s) from the request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

/// Anything that can produce observations for the planner.
pub trait ObservationProvider {
    fn observe(&mut self, scene: &SceneSnapshot) -> Result<ObservationSet, PerceptionError>;

    /// Reference path delivered with the latest observations, if any.
    fn reference(&self) -> Option<Vec<Waypoint>> {
        None
    }
}

/// Exact positions, sizes and velocities of non-ego vehicles within `range`
/// metres longitudinally of the ego.
pub fn observe_ground_truth(scene: &SceneSnapshot, road: &RoadGeometry, range: f64) -> Result<ObservationSet, PerceptionError> {
    let ego = scene.ego().ok_or(PerceptionError::UnknownEgo(scene.ego_id))?;
    let observations = scene
        .vehicles
        .iter()
        .filter(|v| v.id != scene.ego_id && (v.x - ego.x).abs() <= range)
        .map(|v| ObstacleObservation {
            id: v.id,
            x: v.x,
            y: v.y,
            length: v.length,
            width: v.width,
            vx: v.vx,
            vy: v.vy,
            lane: road.lane_of(v.y),
        })
        .collect();
    Ok(ObservationSet::nearest(scene.time, ego.x, observations))
}

#[derive(Debug, Clone)]
pub struct GroundTruthProvider {
    pub road: RoadGeometry,
    pub range: f64,
}

impl ObservationProvider for GroundTruthProvider {
    fn observe(&mut self, scene: &SceneSnapshot) -> Result<ObservationSet, PerceptionError> {
        observe_ground_truth(scene, &self.road, self.range)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityEstimate {
    pub vx: f64,
    pub vy: f64,
    /// No previous sample existed; the velocity is zero.
    pub cold_start: bool,
}

/// Two-sample finite-difference velocity.
pub fn estimate_velocity(now: (f64, f64), previous: Option<(f64, f64)>, dt: f64) -> Result<VelocityEstimate, PerceptionError> {
    if !(dt > 0.0) {
        return Err(PerceptionError::InvalidArgument(format!(
            "sampling period must be positive, got {dt}"
        )));
    }
    Ok(match previous {
        Some(prev) => VelocityEstimate {
            vx: (now.0 - prev.0) / dt,
            vy: (now.1 - prev.1) / dt,
            cold_start: false,
        },
        None => VelocityEstimate {
            vx: 0.0,
            vy: 0.0,
            cold_start: true,
        },
    })
}

/// Remembers the last position of every track and differentiates against it.
#[derive(Debug, Clone, Default)]
pub struct VelocityTracker {
    last: BTreeMap<u64, (f64, f64)>,
}

impl VelocityTracker {
    /// Replaces each observation's velocity with the finite-difference estimate
    /// and forgets tracks that disappeared.
    pub fn update(&mut self, observations: &mut [ObstacleObservation], dt: f64) -> Result<(), PerceptionError> {
        let mut next = BTreeMap::new();
        for o in observations.iter_mut() {
            let v = estimate_velocity((o.x, o.y), self.last.get(&o.id).copied(), dt)?;
            o.vx = v.vx;
            o.vy = v.vy;
            next.insert(o.id, (o.x, o.y));
        }
        self.last = next;
        Ok(())
    }
}

/// Ground truth with zero-mean Gaussian noise on position and dimensions.
/// Velocities come from differencing consecutive noisy positions.
#[derive(Debug, Clone)]
pub struct NoisyProvider {
    pub road: RoadGeometry,
    pub range: f64,
    pub dt: f64,
    position_noise: Normal<f64>,
    dimension_noise: Normal<f64>,
    rng: ChaCha8Rng,
    tracker: VelocityTracker,
}

impl NoisyProvider {
    pub fn new(road: RoadGeometry, range: f64, dt: f64, seed: u64, sigma_pos: f64, sigma_dim: f64) -> Result<Self, PerceptionError> {
        let normal = |s: f64| {
            let invalid = || PerceptionError::InvalidArgument(format!("noise sigma must be >= 0, got {s}"));
            if !(s >= 0.0) {
                return Err(invalid());
            }
            Normal::new(0.0, s).map_err(|_| invalid())
        };
        Ok(Self {
            road,
            range,
            dt,
            position_noise: normal(sigma_pos)?,
            dimension_noise: normal(sigma_dim)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            tracker: VelocityTracker::default(),
        })
    }
}

impl ObservationProvider for NoisyProvider {
    fn observe(&mut self, scene: &SceneSnapshot) -> Result<ObservationSet, PerceptionError> {
        let mut set = observe_ground_truth(scene, &self.road, self.range)?;
        for o in &mut set.observations {
            o.x += self.position_noise.sample(&mut self.rng);
            o.y += self.position_noise.sample(&mut self.rng);
            o.length = (o.length + self.dimension_noise.sample(&mut self.rng)).max(0.1);
            o.width = (o.width + self.dimension_noise.sample(&mut self.rng)).max(0.1);
            o.lane = self.road.lane_of(o.y);
        }
        self.tracker.update(&mut set.observations, self.dt)?;
        Ok(set)
    }
}

/// One vehicle in an external model response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalVehicle {
    pub id: u64,
    pub x_m: f64,
    pub y_m: f64,
    pub length_m: f64,
    pub width_m: f64,
    pub confidence: f64,
}

/// One reference point in an external model response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalWaypoint {
    pub t_s: f64,
    pub x_m: f64,
    pub y_m: f64,
}

/// Full external model response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalRecord {
    pub vehicles: Vec<ExternalVehicle>,
    /// Optional reference path for the ego.
    #[serde(default)]
    pub waypoints: Option<Vec<ExternalWaypoint>>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchemaError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("invalid field in vehicle {id}: {reason}")]
    InvalidField { id: u64, reason: String },
}

/// Parses and validates an external record.
pub fn parse_external(raw: &str) -> Result<ExternalRecord, SchemaError> {
    let record: ExternalRecord = serde_json::from_str(raw).map_err(|e| SchemaError::Malformed(e.to_string()))?;
    for v in &record.vehicles {
        let finite = [v.x_m, v.y_m, v.length_m, v.width_m, v.confidence].iter().all(|f| f.is_finite());
        if !finite || v.length_m <= 0.0 || v.width_m <= 0.0 || !(0.0..=1.0).contains(&v.confidence) {
            return Err(SchemaError::InvalidField {
                id: v.id,
                reason: "non-finite value, non-positive size or confidence outside [0, 1]".into(),
            });
        }
    }
    if let Some(w) = &record.waypoints {
        if w.iter().any(|p| ![p.t_s, p.x_m, p.y_m].iter().all(|f| f.is_finite())) {
            return Err(SchemaError::Malformed("non-finite waypoint".into()));
        }
    }
    Ok(record)
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterOutcome {
    Accepted(ObservationSet),
    /// The response violated the schema; request again.
    RetryNeeded(SchemaError),
    /// Too many consecutive failures; the previous set is returned with its
    /// `fallback` flag set.
    Fallback(ObservationSet),
}

/// Turns external records into observation sets, retrying malformed responses.
#[derive(Debug, Clone)]
pub struct ExternalAdapter {
    pub road: RoadGeometry,
    pub dt: f64,
    /// Consecutive failures tolerated before falling back.
    pub max_attempts: usize,
    previous: ObservationSet,
    failures: usize,
    tracker: VelocityTracker,
    waypoints: Option<Vec<Waypoint>>,
}

impl ExternalAdapter {
    pub fn new(road: RoadGeometry, dt: f64) -> Self {
        Self {
            road,
            dt,
            max_attempts: 2,
            previous: ObservationSet::default(),
            failures: 0,
            tracker: VelocityTracker::default(),
            waypoints: None,
        }
    }

    /// Waypoints from the last accepted record, if it carried any.
    pub fn waypoints(&self) -> Option<&[Waypoint]> {
        self.waypoints.as_deref()
    }

    pub fn adapt(&mut self, raw: &str, timestamp: f64, ego_x: f64) -> AdapterOutcome {
        match parse_external(raw) {
            Ok(record) => {
                self.failures = 0;
                let mut observations: Vec<ObstacleObservation> = record
                    .vehicles
                    .iter()
                    .map(|v| ObstacleObservation {
                        id: v.id,
                        x: v.x_m,
                        y: v.y_m,
                        length: v.length_m,
                        width: v.width_m,
                        vx: 0.0,
                        vy: 0.0,
                        lane: self.road.lane_of(v.y_m),
                    })
                    .collect();
                // dt is validated at construction time by the provider
                let _ = self.tracker.update(&mut observations, self.dt);
                let set = ObservationSet::nearest(timestamp, ego_x, observations);
                self.previous = set.clone();
                self.waypoints = record.waypoints.map(|w| {
                    w.iter()
                        .map(|p| Waypoint {
                            t: p.t_s,
                            x: p.x_m,
                            y: p.y_m,
                        })
                        .collect()
                });
                AdapterOutcome::Accepted(set)
            }
            Err(e) => self.fail(e),
        }
    }

    /// Counts a failed attempt toward the retry budget.
    pub fn fail(&mut self, error: SchemaError) -> AdapterOutcome {
        self.failures += 1;
        if self.failures >= self.max_attempts {
            self.failures = 0;
            let mut set = self.previous.clone();
            set.fallback = true;
            AdapterOutcome::Fallback(set)
        } else {
            AdapterOutcome::RetryNeeded(error)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EndpointError {
    #[error("endpoint not configured: {0}")]
    NotConfigured(String),
    #[error("request failed: {0}")]
    Request(String),
}

/// A blocking source of external model responses.
pub trait Endpoint {
    fn request(&mut self, scene: &SceneSnapshot) -> Result<String, EndpointError>;
}

/// Replays canned responses in order, then repeats the last one.
#[derive(Debug, Clone, Default)]
pub struct StubEndpoint {
    pub responses: Vec<String>,
    cursor: usize,
}

impl StubEndpoint {
    pub fn new(responses: Vec<String>) -> Self {
        Self { responses, cursor: 0 }
    }
}

impl Endpoint for StubEndpoint {
    fn request(&mut self, _scene: &SceneSnapshot) -> Result<String, EndpointError> {
        let r = self
            .responses
            .get(self.cursor.min(self.responses.len().saturating_sub(1)))
            .cloned()
            .ok_or_else(|| EndpointError::NotConfigured("no canned responses".into()))?;
        self.cursor += 1;
        Ok(r)
    }
}

pub const ENDPOINT_URL_VAR: &str = "VISIOPATH_VLM_URL";
pub const ENDPOINT_KEY_VAR: &str = "VISIOPATH_VLM_KEY";

/// Posts the scene as JSON to the URL in `VISIOPATH_VLM_URL`, with the bearer
/// token from `VISIOPATH_VLM_KEY` when set.
#[cfg(feature = "http")]
pub struct HttpEndpoint {
    url: String,
    key: Option<String>,
    agent: ureq::Agent,
}

#[cfg(feature = "http")]
impl HttpEndpoint {
    pub fn from_env(timeout: std::time::Duration) -> Result<Self, EndpointError> {
        let url = std::env::var(ENDPOINT_URL_VAR).map_err(|_| EndpointError::NotConfigured(ENDPOINT_URL_VAR.into()))?;
        let key = std::env::var(ENDPOINT_KEY_VAR).ok();
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Ok(Self { url, key, agent })
    }
}

#[cfg(feature = "http")]
impl Endpoint for HttpEndpoint {
    fn request(&mut self, scene: &SceneSnapshot) -> Result<String, EndpointError> {
        let body = serde_json::to_string(scene).map_err(|e| EndpointError::Request(e.to_string()))?;
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| EndpointError::Request(e.to_string()))?;
        resp.body_mut().read_to_string().map_err(|e| EndpointError::Request(e.to_string()))
    }
}

/// Provider backed by an external endpoint. Request failures and malformed
/// responses count toward the adapter's retry budget.
pub struct ExternalProvider<E: Endpoint> {
    pub endpoint: E,
    pub adapter: ExternalAdapter,
}

impl<E: Endpoint> ExternalProvider<E> {
    pub fn new(endpoint: E, road: RoadGeometry, dt: f64) -> Result<Self, PerceptionError> {
        if !(dt > 0.0) {
            return Err(PerceptionError::InvalidArgument(format!(
                "sampling period must be positive, got {dt}"
            )));
        }
        Ok(Self {
            endpoint,
            adapter: ExternalAdapter::new(road, dt),
        })
    }
}

impl<E: Endpoint> ObservationProvider for ExternalProvider<E> {
    fn reference(&self) -> Option<Vec<Waypoint>> {
        self.adapter.waypoints().map(<[Waypoint]>::to_vec)
    }

    fn observe(&mut self, scene: &SceneSnapshot) -> Result<ObservationSet, PerceptionError> {
        let ego = scene.ego().ok_or(PerceptionError::UnknownEgo(scene.ego_id))?;
        loop {
            let outcome = match self.endpoint.request(scene) {
                Ok(raw) => self.adapter.adapt(&raw, scene.time, ego.x),
                Err(e) => self.adapter.fail(SchemaError::Malformed(e.to_string())),
            };
            match outcome {
                AdapterOutcome::Accepted(set) | AdapterOutcome::Fallback(set) => return Ok(set),
                AdapterOutcome::RetryNeeded(_) => continue,
            }
        }
    }
}
