//! Event-triggered receding-horizon coordinator.
//!
//! Every control period the coordinator decides whether to re-optimize. When it
//! does, it builds an [`OcpProblem`] from the highest-priority obstacles, seeds
//! the solver, runs DDP and checks the plan with the safety layer, escalating
//! obstacle weights on failure and braking as a last resort. Otherwise it keeps
//! executing the cached plan as long as that plan still verifies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ddp::{self, SolverConfig, SolverResult, SolverStatus, Trajectory};
use crate::dynamics::{control_bounds_saturated, rollout_clipped, ControlInput, RoadGeometry, VehicleParams, VehicleState};
use crate::ocp::{CostWeights, ObstacleTrack, OcpProblem};
pub use crate::perception::Waypoint;
use crate::perception::{ObservationSet, ObstacleObservation};
use crate::safety::{self, SafetyConfig, SafetyReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MpcError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Offset that ranks every vehicle behind the ego after every vehicle ahead.
pub const BEHIND_OFFSET: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerConfig {
    /// Replan at least this often (s).
    pub horizon_time: f64,
    /// Never replan more often than this (s), unless forced.
    pub min_interval: f64,
    /// Obstacle prediction error that triggers a replan (m).
    pub deviation_threshold: f64,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            horizon_time: 3.0,
            min_interval: 1.0,
            deviation_threshold: 2.0,
        }
    }
}

/// Constant-velocity prediction recorded at the last replan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Prediction {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerState {
    pub config: TriggerConfig,
    pub t_last: Option<f64>,
    previous_count: usize,
    previous_lanes: BTreeMap<u64, usize>,
    predictions: BTreeMap<u64, Prediction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TriggerFlags {
    /// No plan has been made yet.
    pub initial: bool,
    pub horizon: bool,
    pub new_obstacle: bool,
    pub deviation: bool,
    pub lane_change: bool,
}

impl TriggerFlags {
    pub fn any(&self) -> bool {
        self.initial || self.horizon || self.new_obstacle || self.deviation || self.lane_change
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerDecision {
    pub replan: bool,
    pub fired: TriggerFlags,
    /// Some criterion fired but the minimum interval had not elapsed.
    pub suppressed: bool,
}

// Absorbs rounding in times built from step counts.
const TIME_EPS: f64 = 1e-9;

impl TriggerState {
    pub fn new(config: TriggerConfig) -> Self {
        Self {
            config,
            t_last: None,
            previous_count: 0,
            previous_lanes: BTreeMap::new(),
            predictions: BTreeMap::new(),
        }
    }

    /// Evaluates the replanning criteria for the current observations.
    pub fn should_replan(&self, now: f64, current: &ObservationSet) -> TriggerDecision {
        let Some(t_last) = self.t_last else {
            let fired = TriggerFlags {
                initial: true,
                ..TriggerFlags::default()
            };
            return TriggerDecision {
                replan: true,
                fired,
                suppressed: false,
            };
        };
        let elapsed = now - t_last;
        let deviation = current
            .observations
            .iter()
            .filter_map(|o| {
                self.predictions.get(&o.id).map(|p| {
                    let dt = now - p.time;
                    ((o.x - (p.x + p.vx * dt)).powi(2) + (o.y - (p.y + p.vy * dt)).powi(2)).sqrt()
                })
            })
            .fold(0.0, f64::max);
        let lane_change = current
            .observations
            .iter()
            .any(|o| self.previous_lanes.get(&o.id).is_some_and(|l| l.abs_diff(o.lane) >= 1));
        let fired = TriggerFlags {
            initial: false,
            horizon: elapsed + TIME_EPS >= self.config.horizon_time,
            new_obstacle: current.len() > self.previous_count,
            deviation: deviation > self.config.deviation_threshold,
            lane_change,
        };
        let too_soon = elapsed + TIME_EPS < self.config.min_interval;
        TriggerDecision {
            replan: fired.any() && !too_soon,
            fired,
            suppressed: fired.any() && too_soon,
        }
    }

    /// Records a replan at `now` and the predictions it was based on.
    pub fn record_replan(&mut self, now: f64, current: &ObservationSet) {
        self.t_last = Some(now);
        self.predictions = current
            .observations
            .iter()
            .map(|o| {
                (
                    o.id,
                    Prediction {
                        x: o.x,
                        y: o.y,
                        vx: o.vx,
                        vy: o.vy,
                        time: now,
                    },
                )
            })
            .collect();
    }

    /// Remembers this cycle's obstacle count and lanes for the next evaluation.
    pub fn observe(&mut self, current: &ObservationSet) {
        self.previous_count = current.len();
        self.previous_lanes = current.observations.iter().map(|o| (o.id, o.lane)).collect();
    }
}

pub fn should_replan(now: f64, trigger: &TriggerState, current: &ObservationSet) -> TriggerDecision {
    trigger.should_replan(now, current)
}

/// Priority score: distance ahead, or distance minus [`BEHIND_OFFSET`] behind.
pub fn priority_score(ego_x: f64, obstacle_x: f64) -> f64 {
    let d = obstacle_x - ego_x;
    if obstacle_x >= ego_x {
        d
    } else {
        d - BEHIND_OFFSET
    }
}

/// Orders obstacles for the optimizer: vehicles ahead by increasing distance,
/// then vehicles behind from nearest to farthest, ties by id; keeps `cap`.
pub fn prioritize(ego_x: f64, observations: &[ObstacleObservation], cap: usize) -> Vec<ObstacleObservation> {
    let mut ahead: Vec<_> = observations.iter().filter(|o| o.x >= ego_x).copied().collect();
    let mut behind: Vec<_> = observations.iter().filter(|o| o.x < ego_x).copied().collect();
    ahead.sort_by(|a, b| {
        priority_score(ego_x, a.x)
            .total_cmp(&priority_score(ego_x, b.x))
            .then(a.id.cmp(&b.id))
    });
    behind.sort_by(|a, b| {
        priority_score(ego_x, b.x)
            .total_cmp(&priority_score(ego_x, a.x))
            .then(a.id.cmp(&b.id))
    });
    ahead.extend(behind);
    ahead.truncate(cap);
    ahead
}

/// `v + sat(target - v, -limit, limit)`.
pub fn shape_speed_command(v_current: f64, v_target: f64, limit: f64) -> f64 {
    v_current + (v_target - v_current).clamp(-limit, limit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedPolicy {
    pub v_nominal: f64,
    pub ramp_step: f64,
    pub ramp_period: f64,
    /// Full leader following at or below this distance (m).
    pub follow_near: f64,
    /// Leader ignored beyond this distance (m).
    pub follow_far: f64,
    pub leader_factor: f64,
    /// Largest speed-command change per control period (m/s).
    pub command_delta: f64,
}

impl Default for SpeedPolicy {
    fn default() -> Self {
        Self {
            v_nominal: 25.0,
            ramp_step: 0.5,
            ramp_period: 4.0,
            follow_near: 20.0,
            follow_far: 50.0,
            leader_factor: 0.95,
            command_delta: 1.0,
        }
    }
}

impl SpeedPolicy {
    pub fn validate(&self) -> Result<(), MpcError> {
        let positive = [
            self.v_nominal,
            self.ramp_step,
            self.ramp_period,
            self.follow_near,
            self.leader_factor,
            self.command_delta,
        ]
        .iter()
        .all(|v| v.is_finite() && *v > 0.0);
        if !positive || self.follow_near >= self.follow_far {
            return Err(MpcError::InvalidArgument(format!("invalid speed policy {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Leader {
    /// Center-to-center distance ahead (m).
    pub distance: f64,
    pub speed: f64,
}

/// Progressive target: `ramp_base` raised by one step per elapsed period,
/// capped at the nominal speed.
pub fn progressive_speed(policy: &SpeedPolicy, ramp_base: f64, elapsed: f64) -> f64 {
    let steps = ((elapsed + TIME_EPS) / policy.ramp_period).floor().max(0.0);
    (ramp_base + policy.ramp_step * steps).min(policy.v_nominal)
}

/// Desired speed under the leader-following policy. `progressive` is the
/// free-road target from [`progressive_speed`].
pub fn desired_speed(policy: &SpeedPolicy, leader: Option<Leader>, v_current: f64, progressive: f64) -> f64 {
    match leader {
        Some(l) if l.distance <= policy.follow_near => policy.v_nominal.min(policy.leader_factor * l.speed),
        Some(l) if l.distance <= policy.follow_far => {
            let w = 1.0 - (l.distance - policy.follow_near) / (policy.follow_far - policy.follow_near);
            policy.v_nominal.min(w * policy.leader_factor * l.speed + (1.0 - w) * v_current)
        }
        _ => progressive.min(policy.v_nominal),
    }
}

/// Nearest vehicle ahead whose lateral extent overlaps the ego's.
pub fn find_leader(ego: &VehicleState, ego_width: f64, observations: &[ObstacleObservation]) -> Option<Leader> {
    observations
        .iter()
        .filter(|o| o.x > ego.x && safety::lateral_clearance(ego.y, o.y, ego_width, o.width) < 0.0)
        .min_by(|a, b| a.x.total_cmp(&b.x).then(a.id.cmp(&b.id)))
        .map(|o| Leader {
            distance: o.x - ego.x,
            speed: o.vx,
        })
}

/// Natural cubic spline through `(t_i, y_i)` with strictly increasing `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline {
    t: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn new(t: &[f64], y: &[f64]) -> Result<Self, MpcError> {
        let n = t.len();
        if n < 2 || y.len() != n || t.windows(2).any(|w| !(w[1] > w[0])) || y.iter().any(|v| !v.is_finite()) {
            return Err(MpcError::InvalidArgument(
                "spline needs >= 2 knots with increasing abscissae".into(),
            ));
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system for interior second derivatives (Thomas algorithm).
            let k = n - 2;
            let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                diag[i] = 2.0 * (h[i] + h[i + 1]);
                rhs[i] = 6.0 * ((y[i + 2] - y[i + 1]) / h[i + 1] - (y[i + 1] - y[i]) / h[i]);
            }
            for i in 1..k {
                let f = h[i] / diag[i - 1];
                diag[i] -= f * h[i];
                rhs[i] -= f * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i];
            }
        }
        Ok(Self {
            t: t.to_vec(),
            y: y.to_vec(),
            m,
        })
    }

    /// Value at `s`; linear extrapolation outside the knot range.
    pub fn eval(&self, s: f64) -> f64 {
        let n = self.t.len();
        if s <= self.t[0] {
            return self.y[0] + self.slope(0, 0.0) * (s - self.t[0]);
        }
        if s >= self.t[n - 1] {
            let h = self.t[n - 1] - self.t[n - 2];
            return self.y[n - 1] + self.slope(n - 2, h) * (s - self.t[n - 1]);
        }
        let i = self.t.partition_point(|ti| *ti <= s).saturating_sub(1).min(n - 2);
        let h = self.t[i + 1] - self.t[i];
        let a = (self.t[i + 1] - s) / h;
        let b = (s - self.t[i]) / h;
        a * self.y[i] + b * self.y[i + 1] + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }

    /// First derivative within interval `i` at offset `u` from its left knot.
    fn slope(&self, i: usize, u: f64) -> f64 {
        let h = self.t[i + 1] - self.t[i];
        let a = (h - u) / h;
        let b = u / h;
        (self.y[i + 1] - self.y[i]) / h - (3.0 * a * a - 1.0) / 6.0 * h * self.m[i] + (3.0 * b * b - 1.0) / 6.0 * h * self.m[i + 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitKind {
    Zero,
    Reference,
    /// A reference was supplied but its rollout was unsafe.
    ReferenceRejected,
    WarmStart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Initialization {
    pub controls: Vec<ControlInput>,
    pub kind: InitKind,
}

/// Controls that track `reference`: spline the waypoints, resample every `dt`,
/// difference positions into velocities and velocities into accelerations.
/// The first velocity is the current one so the rollout starts consistently.
/// Returns zeros when there is no usable reference or when the clipped rollout
/// of the reference controls is unsafe against `obstacles`.
#[allow(clippy::too_many_arguments)]
pub fn initialize_controls(
    reference: Option<&[Waypoint]>,
    current: &VehicleState,
    horizon: usize,
    params: &VehicleParams,
    road: &RoadGeometry,
    obstacles: &[ObstacleObservation],
    safety_config: &SafetyConfig,
) -> Initialization {
    let zeros = |kind| Initialization {
        controls: vec![ControlInput::ZERO; horizon],
        kind,
    };
    let Some(waypoints) = reference else {
        return zeros(InitKind::Zero);
    };
    let Some(controls) = reference_controls(waypoints, current, horizon, params.dt) else {
        return zeros(InitKind::ReferenceRejected);
    };
    let (controls, states) = rollout_clipped(current, &controls, params, road);
    if states.len() > safety_config.steps() {
        match safety::verify(&states, params, obstacles, road, safety_config) {
            Ok(report) if !report.unsafe_plan => {}
            _ => return zeros(InitKind::ReferenceRejected),
        }
    }
    Initialization {
        controls,
        kind: InitKind::Reference,
    }
}

fn reference_controls(waypoints: &[Waypoint], current: &VehicleState, horizon: usize, dt: f64) -> Option<Vec<ControlInput>> {
    let t: Vec<f64> = waypoints.iter().map(|w| w.t).collect();
    let sx = CubicSpline::new(&t, &waypoints.iter().map(|w| w.x).collect::<Vec<_>>()).ok()?;
    let sy = CubicSpline::new(&t, &waypoints.iter().map(|w| w.y).collect::<Vec<_>>()).ok()?;
    let positions: Vec<(f64, f64)> = (0..=horizon + 1)
        .map(|k| (sx.eval(k as f64 * dt), sy.eval(k as f64 * dt)))
        .collect();
    let mut velocities: Vec<(f64, f64)> = positions
        .windows(2)
        .map(|p| ((p[1].0 - p[0].0) / dt, (p[1].1 - p[0].1) / dt))
        .collect();
    velocities[0] = (current.vx, current.vy);
    let controls: Vec<ControlInput> = velocities
        .windows(2)
        .map(|v| ControlInput::new((v[1].0 - v[0].0) / dt, (v[1].1 - v[0].1) / dt))
        .collect();
    controls.iter().all(ControlInput::is_finite).then_some(controls)
}

/// Gap-seeking reference: pick the current or an adjacent lane with the most
/// free space ahead (an adjacent lane only if nobody is alongside), then move
/// toward `v_target` at a comfortable acceleration while blending laterally to
/// that lane's center.
pub fn heuristic_reference(
    ego: &VehicleState,
    params: &VehicleParams,
    road: &RoadGeometry,
    observations: &[ObstacleObservation],
    v_target: f64,
    duration: f64,
) -> Vec<Waypoint> {
    const LOOKAHEAD: f64 = 150.0;
    const ACCEL: f64 = 1.5;
    const SPACING: f64 = 0.5;
    const LANE_CHANGE_TIME: f64 = 3.0;

    let current_lane = road.lane_of(ego.y);
    let gap_ahead = |lane: usize| {
        observations
            .iter()
            .filter(|o| o.lane == lane && o.x > ego.x)
            .map(|o| o.x - ego.x - 0.5 * (o.length + params.length))
            .fold(LOOKAHEAD, f64::min)
    };
    let alongside = |lane: usize| {
        observations
            .iter()
            .any(|o| o.lane == lane && (o.x - ego.x).abs() < 0.5 * (o.length + params.length) + 10.0)
    };
    let mut target = current_lane;
    let mut best = gap_ahead(current_lane);
    let neighbours = [
        current_lane.checked_sub(1),
        (current_lane + 1 < road.lane_count).then_some(current_lane + 1),
    ];
    for lane in neighbours.into_iter().flatten() {
        let gap = gap_ahead(lane);
        // only worth moving for a clearly larger gap
        if !alongside(lane) && gap > best + 20.0 {
            best = gap;
            target = lane;
        }
    }
    let y_target = road.lane_center(target);

    let n = (duration / SPACING).ceil() as usize + 2;
    let mut waypoints = Vec::with_capacity(n);
    let (mut x, mut v) = (ego.x, ego.vx);
    for i in 0..n {
        let t = i as f64 * SPACING;
        let s = (t / LANE_CHANGE_TIME).min(1.0);
        let blend = s * s * (3.0 - 2.0 * s);
        waypoints.push(Waypoint {
            t,
            x,
            y: ego.y + (y_target - ego.y) * blend,
        });
        let dv = (v_target - v).clamp(-ACCEL * SPACING, ACCEL * SPACING);
        x += (v + 0.5 * dv) * SPACING;
        v += dv;
    }
    waypoints
}

/// Previous solution advanced by `elapsed` steps and padded with its last control.
pub fn shift_warm_start(previous: &[ControlInput], elapsed: usize, horizon: usize) -> Vec<ControlInput> {
    let last = previous.last().copied().unwrap_or(ControlInput::ZERO);
    (0..horizon).map(|k| previous.get(k + elapsed).copied().unwrap_or(last)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriggerMode {
    /// Replan only when a trigger fires (or the cached plan fails verification).
    EventTriggered,
    /// Replan every control period.
    FixedInterval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitStrategy {
    /// Always start from zero controls.
    Zero,
    /// Reference controls or the shifted previous plan, whichever costs less.
    Reference,
    /// Shifted previous plan (zeros for the first plan).
    WarmStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub horizon: usize,
    pub params: VehicleParams,
    pub road: RoadGeometry,
    /// Cost weights; `v_des` is overwritten by the speed policy every replan.
    pub weights: CostWeights,
    pub potential_weight: f64,
    pub time_gap: f64,
    pub obstacle_cap: usize,
    pub trigger: TriggerConfig,
    pub trigger_mode: TriggerMode,
    pub init: InitStrategy,
    pub safety_enabled: bool,
    pub safety: SafetyConfig,
    pub solver: SolverConfig,
    pub speed: SpeedPolicy,
    pub escalation_attempts: usize,
    pub escalation_factor: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 30,
            params: VehicleParams::default(),
            road: RoadGeometry::default(),
            weights: CostWeights::default(),
            potential_weight: 50.0,
            time_gap: 1.0,
            obstacle_cap: 6,
            trigger: TriggerConfig::default(),
            trigger_mode: TriggerMode::EventTriggered,
            init: InitStrategy::Reference,
            safety_enabled: true,
            safety: SafetyConfig::default(),
            solver: SolverConfig::default(),
            speed: SpeedPolicy::default(),
            escalation_attempts: 3,
            escalation_factor: 2.0,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        let invalid = |e: String| MpcError::InvalidArgument(e);
        self.params.validate().map_err(|e| invalid(e.to_string()))?;
        self.weights.validate().map_err(|e| invalid(e.to_string()))?;
        self.safety.validate().map_err(|e| invalid(e.to_string()))?;
        self.solver.validate().map_err(|e| invalid(e.to_string()))?;
        self.speed.validate()?;
        if self.horizon == 0 || self.obstacle_cap == 0 {
            return Err(invalid("horizon and obstacle cap must be positive".into()));
        }
        if self.horizon < self.safety.steps() {
            return Err(invalid(format!(
                "horizon of {} steps is shorter than the {}-step verification window",
                self.horizon,
                self.safety.steps()
            )));
        }
        if !(self.potential_weight >= 0.0 && self.time_gap >= 0.0 && self.escalation_factor >= 1.0) {
            return Err(invalid("potential weight, time gap and escalation factor out of range".into()));
        }
        if (self.safety.dt - self.params.dt).abs() > 1e-12 {
            return Err(invalid("safety and vehicle sampling periods differ".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct CachedPlan {
    controls: Vec<ControlInput>,
    /// Control-cycle index at which the plan's first control was applied.
    start_cycle: u64,
}

/// Per-cycle record for traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleTelemetry {
    pub cycle: u64,
    pub time: f64,
    pub triggers: TriggerFlags,
    pub suppressed: bool,
    pub replanned: bool,
    /// Replan forced by a failed verification or a previous emergency.
    pub forced: bool,
    pub init: Option<InitKind>,
    pub solver_calls: usize,
    pub iterations: usize,
    pub solver_status: Option<SolverStatus>,
    pub escalations: usize,
    pub emergency: bool,
    /// Verdict of the first candidate considered this cycle.
    pub unsafe_plan: bool,
    pub high_risk: bool,
    pub flagged: Vec<u64>,
    pub desired_speed: f64,
    pub speed_command: f64,
    pub control: ControlInput,
    /// Planned states (index 0 is the current state), recorded on replanning cycles.
    pub plan: Option<Vec<VehicleState>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleOutput {
    pub control: ControlInput,
    /// Speed command cap for the actuation layer.
    pub speed_command: f64,
    pub solver: Option<SolverResult>,
    pub safety: Option<SafetyReport>,
    pub telemetry: CycleTelemetry,
}

/// Receding-horizon controller state.
#[derive(Debug, Clone)]
pub struct Coordinator {
    pub config: MpcConfig,
    pub trigger: TriggerState,
    plan: Option<CachedPlan>,
    force_replan: bool,
    cycle: u64,
    ramp_base: Option<f64>,
    ramp_start: f64,
}

impl Coordinator {
    pub fn new(config: MpcConfig) -> Result<Self, MpcError> {
        config.validate()?;
        Ok(Self {
            trigger: TriggerState::new(config.trigger),
            config,
            plan: None,
            force_replan: false,
            cycle: 0,
            ramp_base: None,
            ramp_start: 0.0,
        })
    }

    fn problem(
        &self,
        ego: &VehicleState,
        obstacles: &[ObstacleObservation],
        v_des: f64,
        scales: &BTreeMap<u64, f64>,
    ) -> Result<OcpProblem, MpcError> {
        let c = &self.config;
        let tracks = obstacles
            .iter()
            .map(|o| {
                let weight = c.potential_weight * scales.get(&o.id).copied().unwrap_or(1.0);
                ObstacleTrack::constant_velocity(
                    o.id,
                    (o.x, o.y),
                    (o.vx, o.vy),
                    o.length,
                    c.road.lane_width,
                    weight,
                    c.time_gap,
                    c.horizon,
                    c.params.dt,
                )
            })
            .collect();
        let weights = CostWeights { v_des, ..c.weights };
        OcpProblem::new(c.horizon, *ego, weights, tracks, c.params, c.road).map_err(|e| MpcError::InvalidArgument(e.to_string()))
    }

    fn verify(&self, states: &[VehicleState], observations: &ObservationSet) -> Result<SafetyReport, MpcError> {
        let c = &self.config;
        safety::verify(states, &c.params, &observations.observations, &c.road, &c.safety)
            .map_err(|e| MpcError::InvalidArgument(e.to_string()))
    }

    fn desired(&mut self, now: f64, ego: &VehicleState, observations: &ObservationSet) -> f64 {
        let policy = self.config.speed;
        let leader = find_leader(ego, self.config.params.width, &observations.observations).filter(|l| l.distance <= policy.follow_far);
        let base = *self.ramp_base.get_or_insert(ego.vx);
        let progressive = progressive_speed(&policy, base, now - self.ramp_start);
        let v = desired_speed(&policy, leader, ego.vx, progressive);
        if leader.is_some() && v < progressive {
            // leader binding: the ramp restarts from the current speed once it is released
            self.ramp_base = Some(ego.vx);
            self.ramp_start = now;
        }
        v
    }

    /// Runs one control period and returns the control to apply.
    pub fn cycle(
        &mut self,
        now: f64,
        ego: &VehicleState,
        observations: &ObservationSet,
        reference: Option<&[Waypoint]>,
    ) -> Result<CycleOutput, MpcError> {
        if !ego.is_finite() {
            return Err(MpcError::InvalidArgument("non-finite ego state".into()));
        }
        let cycle = self.cycle;
        self.cycle += 1;
        let c = self.config.clone();
        let v_des = self.desired(now, ego, observations);
        let speed_command = shape_speed_command(ego.vx, v_des, c.speed.command_delta);

        let decision = match c.trigger_mode {
            TriggerMode::EventTriggered => self.trigger.should_replan(now, observations),
            TriggerMode::FixedInterval => TriggerDecision {
                replan: true,
                fired: TriggerFlags {
                    initial: self.trigger.t_last.is_none(),
                    ..TriggerFlags::default()
                },
                suppressed: false,
            },
        };
        let mut telemetry = CycleTelemetry {
            cycle,
            time: now,
            triggers: decision.fired,
            suppressed: decision.suppressed,
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
            desired_speed: v_des,
            speed_command,
            control: ControlInput::ZERO,
            plan: None,
        };

        let mut replan = decision.replan || self.force_replan || self.plan.is_none();
        telemetry.forced = self.force_replan || (self.plan.is_none() && !decision.replan);

        // Continue the cached plan if nothing asks for a new one.
        if !replan {
            let plan = self.plan.as_ref().expect("cached plan present when not replanning");
            let elapsed = (cycle - plan.start_cycle) as usize;
            let continuation = shift_warm_start(&plan.controls, elapsed, c.horizon);
            let (controls, states) = rollout_clipped(ego, &continuation, &c.params, &c.road);
            let report = self.verify(&states, observations)?;
            telemetry.unsafe_plan = report.unsafe_plan;
            telemetry.high_risk = report.high_risk;
            telemetry.flagged = report.flagged_obstacles();
            if c.safety_enabled && !report.is_safe() {
                replan = true;
                telemetry.forced = true;
            } else {
                telemetry.control = controls[0];
                self.trigger.observe(observations);
                return Ok(CycleOutput {
                    control: controls[0],
                    speed_command,
                    solver: None,
                    safety: Some(report),
                    telemetry,
                });
            }
        }
        debug_assert!(replan);
        self.force_replan = false;
        telemetry.replanned = true;

        let mut selected = prioritize(ego.x, &observations.observations, c.obstacle_cap);
        let mut scales: BTreeMap<u64, f64> = BTreeMap::new();
        let problem = self.problem(ego, &selected, v_des, &scales)?;

        let warm = self
            .plan
            .as_ref()
            .map(|p| shift_warm_start(&p.controls, (cycle - p.start_cycle) as usize, c.horizon));
        let init = match c.init {
            InitStrategy::Zero => Initialization {
                controls: vec![ControlInput::ZERO; c.horizon],
                kind: InitKind::Zero,
            },
            InitStrategy::WarmStart => match warm {
                Some(controls) => Initialization {
                    controls,
                    kind: InitKind::WarmStart,
                },
                None => Initialization {
                    controls: vec![ControlInput::ZERO; c.horizon],
                    kind: InitKind::Zero,
                },
            },
            InitStrategy::Reference => {
                let generated;
                let reference = match reference {
                    Some(r) => Some(r),
                    None => {
                        generated = heuristic_reference(
                            ego,
                            &c.params,
                            &c.road,
                            &observations.observations,
                            v_des,
                            c.horizon as f64 * c.params.dt,
                        );
                        Some(generated.as_slice())
                    }
                };
                let from_reference =
                    initialize_controls(reference, ego, c.horizon, &c.params, &c.road, &observations.observations, &c.safety);
                match warm {
                    Some(controls) => {
                        let ref_cost = Trajectory::rollout(&problem, &from_reference.controls).map(|t| t.cost);
                        let warm_cost = Trajectory::rollout(&problem, &controls).map(|t| t.cost);
                        match (ref_cost, warm_cost) {
                            (Ok(r), Ok(w)) if w < r => Initialization {
                                controls,
                                kind: InitKind::WarmStart,
                            },
                            _ => from_reference,
                        }
                    }
                    None => from_reference,
                }
            }
        };
        telemetry.init = Some(init.kind);

        let mut result = ddp::solve(&problem, &init.controls, &c.solver).map_err(|e| MpcError::InvalidArgument(e.to_string()))?;
        telemetry.solver_calls = 1;
        telemetry.iterations = result.iterations;
        let mut report = self.verify(&result.states, observations)?;
        telemetry.unsafe_plan = report.unsafe_plan;
        telemetry.high_risk = report.high_risk;
        telemetry.flagged = report.flagged_obstacles();

        if c.safety_enabled {
            while !report.is_safe() && telemetry.escalations < c.escalation_attempts {
                telemetry.escalations += 1;
                for id in report.flagged_obstacles() {
                    *scales.entry(id).or_insert(1.0) *= c.escalation_factor;
                    // flagged vehicles join the problem even beyond the cap
                    if !selected.iter().any(|o| o.id == id) {
                        if let Some(o) = observations.get(id) {
                            selected.push(*o);
                        }
                    }
                }
                let problem = self.problem(ego, &selected, v_des, &scales)?;
                result = ddp::solve(&problem, &result.controls, &c.solver).map_err(|e| MpcError::InvalidArgument(e.to_string()))?;
                telemetry.solver_calls += 1;
                telemetry.iterations += result.iterations;
                report = self.verify(&result.states, observations)?;
            }
        }
        telemetry.solver_status = Some(result.status);
        self.trigger.record_replan(now, observations);
        self.trigger.observe(observations);

        if c.safety_enabled && !report.is_safe() {
            let control = emergency_control(ego, &c.params, &c.road);
            telemetry.emergency = true;
            telemetry.control = control;
            self.plan = None;
            self.force_replan = true;
            return Ok(CycleOutput {
                control,
                speed_command,
                solver: Some(result),
                safety: Some(report),
                telemetry,
            });
        }

        let control = control_bounds_saturated(ego, &c.params, &c.road).clip(&result.controls[0]);
        telemetry.control = control;
        telemetry.plan = Some(result.states.clone());
        self.plan = Some(CachedPlan {
            controls: result.controls.clone(),
            start_cycle: cycle,
        });
        Ok(CycleOutput {
            control,
            speed_command,
            solver: Some(result),
            safety: Some(report),
            telemetry,
        })
    }
}

/// Hardest admissible braking with the lateral velocity damped to zero.
pub fn emergency_control(ego: &VehicleState, params: &VehicleParams, road: &RoadGeometry) -> ControlInput {
    let bounds = control_bounds_saturated(ego, params, road);
    bounds.clip(&ControlInput::new(bounds.lower.ux, -ego.vy / params.dt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::control_bounds;

    fn obs(id: u64, x: f64, y: f64, vx: f64, lane: usize) -> ObstacleObservation {
        ObstacleObservation {
            id,
            x,
            y,
            length: 4.5,
            width: 1.8,
            vx,
            vy: 0.0,
            lane,
        }
    }

    fn set(t: f64, o: Vec<ObstacleObservation>) -> ObservationSet {
        ObservationSet {
            timestamp: t,
            observations: o,
            fallback: false,
        }
    }

    #[test]
    fn trigger_horizon_boundary() {
        let mut s = TriggerState::new(TriggerConfig::default());
        let empty = set(0.0, vec![]);
        assert!(s.should_replan(0.0, &empty).fired.initial);
        s.record_replan(0.0, &empty);
        s.observe(&empty);
        assert!(!s.should_replan(2.9, &empty).replan);
        let d = s.should_replan(3.0, &empty);
        assert!(d.replan && d.fired.horizon);
        // step-count rounding
        assert!(s.should_replan(30.0 * 0.1, &empty).fired.horizon);
    }

    #[test]
    fn trigger_new_obstacle() {
        let mut s = TriggerState::new(TriggerConfig::default());
        let four = set(0.0, (0..4).map(|i| obs(i, 20.0 * i as f64, 1.6, 20.0, 0)).collect());
        s.record_replan(0.0, &four);
        s.observe(&four);
        let mut five = four.clone();
        five.observations.push(obs(9, 90.0, 4.8, 20.0, 1));
        let d = s.should_replan(1.5, &five);
        assert!(d.fired.new_obstacle && d.replan);
        assert!(!s.should_replan(1.5, &four).fired.new_obstacle);
    }

    #[test]
    fn trigger_deviation_suppressed_by_min_interval() {
        let mut s = TriggerState::new(TriggerConfig::default());
        let start = set(0.0, vec![obs(1, 50.0, 4.8, 20.0, 1)]);
        s.record_replan(0.0, &start);
        s.observe(&start);
        // predicted x at 0.5 s is 60; observed 57.5
        let now = set(0.5, vec![obs(1, 57.5, 4.8, 20.0, 1)]);
        let d = s.should_replan(0.5, &now);
        assert!(d.fired.deviation && !d.replan && d.suppressed);
        let later = set(1.2, vec![obs(1, 71.5, 4.8, 20.0, 1)]);
        let d = s.should_replan(1.2, &later);
        assert!(d.fired.deviation && d.replan);
    }

    #[test]
    fn trigger_lane_change() {
        let mut s = TriggerState::new(TriggerConfig::default());
        let a = set(0.0, vec![obs(1, 50.0, 4.8, 20.0, 1)]);
        s.record_replan(0.0, &a);
        s.observe(&a);
        let b = set(1.0, vec![obs(1, 70.0, 1.6, 20.0, 0)]);
        assert!(s.should_replan(1.0, &b).fired.lane_change);
    }

    #[test]
    fn priority_scores_and_order() {
        assert_eq!(priority_score(100.0, 130.0), 30.0);
        assert_eq!(priority_score(100.0, 90.0), -1010.0);
        let list = vec![
            obs(1, 90.0, 1.6, 0.0, 0),
            obs(2, 130.0, 1.6, 0.0, 0),
            obs(3, 110.0, 4.8, 0.0, 1),
            obs(4, 60.0, 4.8, 0.0, 1),
            obs(6, 110.0, 8.0, 0.0, 2),
            obs(5, 110.0, 11.2, 0.0, 3),
        ];
        let ids: Vec<u64> = prioritize(100.0, &list, 10).iter().map(|o| o.id).collect();
        assert_eq!(ids, vec![3, 5, 6, 2, 1, 4]);
        assert_eq!(prioritize(100.0, &list, 2).len(), 2);
        let behind: Vec<u64> = prioritize(200.0, &list, 10).iter().map(|o| o.id).collect();
        assert_eq!(behind, vec![2, 3, 5, 6, 1, 4]);
    }

    #[test]
    fn speed_command_saturation() {
        assert_eq!(shape_speed_command(10.0, 15.0, 1.0), 11.0);
        assert!((shape_speed_command(10.0, 10.4, 1.0) - 10.4).abs() < 1e-12);
        assert_eq!(shape_speed_command(10.0, 10.0, 1.0), 10.0);
        assert_eq!(shape_speed_command(10.0, 2.0, 1.0), 9.0);
    }

    #[test]
    fn desired_speed_cases() {
        let p = SpeedPolicy {
            v_nominal: 20.0,
            ..SpeedPolicy::default()
        };
        let l = |d| Some(Leader { distance: d, speed: 10.0 });
        assert!((desired_speed(&p, l(20.0), 15.0, 20.0) - 9.5).abs() < 1e-12);
        assert!((desired_speed(&p, l(35.0), 15.0, 20.0) - (0.5 * 9.5 + 0.5 * 15.0)).abs() < 1e-12);
        assert!((desired_speed(&p, l(50.0), 15.0, 20.0) - 15.0).abs() < 1e-12);
        assert_eq!(desired_speed(&p, l(50.0), 25.0, 20.0), 20.0);
        assert_eq!(desired_speed(&p, l(80.0), 15.0, 17.0), 17.0);
        assert_eq!(desired_speed(&p, None, 15.0, 30.0), 20.0);
    }

    #[test]
    fn progressive_ramp() {
        let p = SpeedPolicy::default();
        assert_eq!(progressive_speed(&p, 20.0, 3.9), 20.0);
        assert_eq!(progressive_speed(&p, 20.0, 4.0), 20.5);
        assert_eq!(progressive_speed(&p, 20.0, 12.0), 21.5);
        assert_eq!(progressive_speed(&p, 24.8, 100.0), 25.0);
    }

    #[test]
    fn spline_reproduces_lines_and_interpolates() {
        let t = [0.0, 0.5, 1.0, 1.5, 2.0];
        let y: Vec<f64> = t.iter().map(|s| 3.0 + 2.0 * s).collect();
        let s = CubicSpline::new(&t, &y).unwrap();
        for k in 0..40 {
            let q = k as f64 * 0.07;
            assert!((s.eval(q) - (3.0 + 2.0 * q)).abs() < 1e-12);
        }
        let y2 = [0.0, 1.0, 0.0, -1.0, 0.0];
        let s2 = CubicSpline::new(&t, &y2).unwrap();
        for (ti, yi) in t.iter().zip(y2) {
            assert!((s2.eval(*ti) - yi).abs() < 1e-12);
        }
        assert!(CubicSpline::new(&[0.0, 0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn spline_matches_dense_natural_system() {
        // Oracle: the natural-spline second derivatives from the full dense system.
        let t = [0.0, 0.4, 1.1, 1.5, 2.6, 3.0];
        let y = [1.0, -0.5, 2.0, 0.3, 0.8, -1.2];
        let n = t.len();
        let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
        let mut b = nalgebra::DVector::<f64>::zeros(n);
        a[(0, 0)] = 1.0;
        a[(n - 1, n - 1)] = 1.0;
        for i in 1..n - 1 {
            let (h0, h1) = (t[i] - t[i - 1], t[i + 1] - t[i]);
            a[(i, i - 1)] = h0;
            a[(i, i)] = 2.0 * (h0 + h1);
            a[(i, i + 1)] = h1;
            b[i] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
        }
        let m = a.lu().solve(&b).unwrap();
        let s = CubicSpline::new(&t, &y).unwrap();
        for i in 0..n {
            assert!((s.m[i] - m[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn init_without_reference_is_zero() {
        let ego = VehicleState::new(0.0, 4.8, 20.0, 0.0);
        let i = initialize_controls(
            None,
            &ego,
            30,
            &VehicleParams::default(),
            &RoadGeometry::default(),
            &[],
            &SafetyConfig::default(),
        );
        assert_eq!(i.kind, InitKind::Zero);
        assert!(i.controls.iter().all(|u| *u == ControlInput::ZERO));
    }

    #[test]
    fn init_from_straight_reference_is_near_zero() {
        let ego = VehicleState::new(10.0, 4.8, 20.0, 0.0);
        let wps: Vec<Waypoint> = (0..8)
            .map(|i| Waypoint {
                t: 0.5 * i as f64,
                x: 10.0 + 10.0 * i as f64,
                y: 4.8,
            })
            .collect();
        let i = initialize_controls(
            Some(&wps),
            &ego,
            30,
            &VehicleParams::default(),
            &RoadGeometry::default(),
            &[],
            &SafetyConfig::default(),
        );
        assert_eq!(i.kind, InitKind::Reference);
        assert!(i.controls.iter().all(|u| u.ux.abs() <= 1e-6 && u.uy.abs() <= 1e-6));
    }

    #[test]
    fn init_rejects_colliding_reference() {
        let ego = VehicleState::new(0.0, 4.8, 20.0, 0.0);
        let wps: Vec<Waypoint> = (0..8)
            .map(|i| Waypoint {
                t: 0.5 * i as f64,
                x: 10.0 * i as f64,
                y: 4.8,
            })
            .collect();
        let blocker = [obs(1, 30.0, 4.8, 0.0, 1)];
        let i = initialize_controls(
            Some(&wps),
            &ego,
            30,
            &VehicleParams::default(),
            &RoadGeometry::default(),
            &blocker,
            &SafetyConfig::default(),
        );
        assert_eq!(i.kind, InitKind::ReferenceRejected);
        assert!(i.controls.iter().all(|u| *u == ControlInput::ZERO));
    }

    #[test]
    fn heuristic_reference_moves_to_open_lane() {
        let ego = VehicleState::new(0.0, 4.8, 20.0, 0.0);
        let road = RoadGeometry::default();
        let slow = [obs(1, 30.0, 4.8, 10.0, 1)];
        let wps = heuristic_reference(&ego, &VehicleParams::default(), &road, &slow, 25.0, 3.0);
        assert!(wps.len() >= 7);
        let last = wps.last().unwrap();
        assert!((last.y - road.lane_center(0)).abs() < 1e-9 || (last.y - road.lane_center(2)).abs() < 1e-9);
        let open = heuristic_reference(&ego, &VehicleParams::default(), &road, &[], 25.0, 3.0);
        assert!(open.iter().all(|w| (w.y - 4.8).abs() < 1e-9));
    }

    #[test]
    fn warm_start_shift() {
        let prev: Vec<ControlInput> = (0..5).map(|k| ControlInput::new(k as f64, 0.0)).collect();
        let s = shift_warm_start(&prev, 2, 5);
        assert_eq!(s.iter().map(|u| u.ux).collect::<Vec<_>>(), vec![2.0, 3.0, 4.0, 4.0, 4.0]);
        assert_eq!(shift_warm_start(&prev, 9, 3), vec![prev[4]; 3]);
    }

    #[test]
    fn empty_road_cycles_follow_cached_plan() {
        let mut c = Coordinator::new(MpcConfig::default()).unwrap();
        let mut ego = VehicleState::new(0.0, 4.8, 25.0, 0.0);
        let empty = ObservationSet::default();
        let first = c.cycle(0.0, &ego, &empty, None).unwrap();
        assert!(first.telemetry.replanned);
        let plan = first.solver.unwrap().controls;
        ego = crate::dynamics::step(&ego, &first.control, 0.1).unwrap();
        for k in 1..10 {
            let out = c.cycle(k as f64 * 0.1, &ego, &empty, None).unwrap();
            assert!(!out.telemetry.replanned);
            assert_eq!(out.control, plan[k]);
            let b = control_bounds(&ego, &c.config.params, &c.config.road).unwrap();
            assert!(b.contains(&out.control, 1e-9));
            ego = crate::dynamics::step(&ego, &out.control, 0.1).unwrap();
        }
        assert!(ego.vx > 24.0 && (ego.y - 4.8).abs() < 1e-6);
    }

    #[test]
    fn cut_in_inside_min_interval_forces_replan() {
        let mut c = Coordinator::new(MpcConfig::default()).unwrap();
        let ego = VehicleState::new(0.0, 4.8, 25.0, 0.0);
        c.cycle(0.0, &ego, &ObservationSet::default(), None).unwrap();
        let ego = VehicleState::new(2.5, 4.8, 25.0, 0.0);
        let cut_in = set(0.1, vec![obs(8, 14.0, 4.8, 18.0, 1)]);
        let out = c.cycle(0.1, &ego, &cut_in, None).unwrap();
        assert!(out.telemetry.triggers.new_obstacle && out.telemetry.suppressed);
        assert!(out.telemetry.replanned && out.telemetry.forced);
    }

    #[test]
    fn cut_in_without_safety_layer_keeps_cached_plan() {
        let config = MpcConfig {
            safety_enabled: false,
            ..MpcConfig::default()
        };
        let mut c = Coordinator::new(config).unwrap();
        let ego = VehicleState::new(0.0, 4.8, 25.0, 0.0);
        c.cycle(0.0, &ego, &ObservationSet::default(), None).unwrap();
        let ego = VehicleState::new(2.5, 4.8, 25.0, 0.0);
        let cut_in = set(0.1, vec![obs(8, 14.0, 4.8, 18.0, 1)]);
        let out = c.cycle(0.1, &ego, &cut_in, None).unwrap();
        assert!(!out.telemetry.replanned);
        assert!(out.telemetry.high_risk || out.telemetry.unsafe_plan);
    }

    #[test]
    fn hopeless_situation_brakes() {
        let mut c = Coordinator::new(MpcConfig::default()).unwrap();
        let ego = VehicleState::new(0.0, 4.8, 25.0, 0.3);
        // stopped car 12 m ahead; every lane blocked alongside
        let o = set(
            0.0,
            vec![obs(1, 12.0, 4.8, 0.0, 1), obs(2, 0.0, 1.6, 25.0, 0), obs(3, 0.0, 8.0, 25.0, 2)],
        );
        let out = c.cycle(0.0, &ego, &o, None).unwrap();
        assert!(out.telemetry.emergency);
        assert_eq!(out.telemetry.escalations, 3);
        assert_eq!(out.control.ux, -6.0);
        assert!((ego.vy + out.control.uy * 0.1).abs() < 1e-12);
        // the next cycle must replan
        let ego2 = crate::dynamics::step(&ego, &out.control, 0.1).unwrap();
        let next = c.cycle(0.1, &ego2, &o, None).unwrap();
        assert!(next.telemetry.replanned && next.telemetry.forced);
    }

    #[test]
    fn fixed_interval_replans_every_cycle() {
        let config = MpcConfig {
            trigger_mode: TriggerMode::FixedInterval,
            init: InitStrategy::WarmStart,
            ..MpcConfig::default()
        };
        let mut c = Coordinator::new(config).unwrap();
        let mut ego = VehicleState::new(0.0, 4.8, 25.0, 0.0);
        for k in 0..5 {
            let out = c.cycle(k as f64 * 0.1, &ego, &ObservationSet::default(), None).unwrap();
            assert!(out.telemetry.replanned);
            if k > 0 {
                assert_eq!(out.telemetry.init, Some(InitKind::WarmStart));
            }
            ego = crate::dynamics::step(&ego, &out.control, 0.1).unwrap();
        }
    }

    #[test]
    fn config_rejects_short_horizon() {
        let config = MpcConfig {
            horizon: 20,
            ..MpcConfig::default()
        };
        assert!(Coordinator::new(config).is_err());
    }
}
