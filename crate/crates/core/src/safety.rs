//! Post-optimization verification of a planned ego trajectory.
//!
//! Obstacles are propagated with constant velocity over the verification
//! horizon. Box intersections and road exits make a plan unsafe; short
//! time-to-collision and small lateral clearance make it high-risk.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{RoadGeometry, VehicleParams, VehicleState};
use crate::perception::ObstacleObservation;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SafetyError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyConfig {
    /// Verification horizon (s).
    pub horizon: f64,
    pub ttc_min: f64,
    pub lateral_min: f64,
    pub dt: f64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            horizon: 3.0,
            ttc_min: 2.0,
            lateral_min: 0.5,
            dt: 0.1,
        }
    }
}

impl SafetyConfig {
    /// Number of verified steps, `floor(horizon / dt)`.
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<(), SafetyError> {
        if [self.horizon, self.ttc_min, self.lateral_min, self.dt]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            Ok(())
        } else {
            Err(SafetyError::InvalidArgument(format!("invalid safety configuration {self:?}")))
        }
    }
}

/// Closed axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub center_x: f64,
    pub center_y: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl BoundingBox {
    pub fn new(center_x: f64, center_y: f64, length: f64, width: f64) -> Self {
        Self {
            center_x,
            center_y,
            half_length: 0.5 * length,
            half_width: 0.5 * width,
        }
    }

    pub fn overlaps_longitudinally(&self, other: &BoundingBox) -> bool {
        self.center_x - self.half_length <= other.center_x + other.half_length
            && other.center_x - other.half_length <= self.center_x + self.half_length
    }

    pub fn overlaps_laterally(&self, other: &BoundingBox) -> bool {
        self.center_y - self.half_width <= other.center_y + other.half_width
            && other.center_y - other.half_width <= self.center_y + self.half_width
    }
}

pub fn boxes_intersect(a: &BoundingBox, b: &BoundingBox) -> bool {
    a.overlaps_longitudinally(b) && a.overlaps_laterally(b)
}

/// Constant-velocity position `m` steps ahead.
pub fn predict_obstacle(position: Vector2<f64>, velocity: Vector2<f64>, m: usize, dt: f64) -> Vector2<f64> {
    position + velocity * (m as f64 * dt)
}

/// Time to collision with an obstacle ahead; infinite when the gap is opening.
pub fn ttc(ego_x: f64, ego_vx: f64, ego_half_length: f64, obs_x: f64, obs_vx: f64, obs_half_length: f64) -> f64 {
    let gap = (obs_x - obs_half_length) - (ego_x + ego_half_length);
    let closing = ego_vx - obs_vx;
    if closing > 0.0 {
        gap / closing
    } else {
        f64::INFINITY
    }
}

/// Edge-to-edge lateral distance; negative when the lateral extents overlap.
pub fn lateral_clearance(ego_y: f64, obs_y: f64, ego_width: f64, obs_width: f64) -> f64 {
    (ego_y - obs_y).abs() - 0.5 * (ego_width + obs_width)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    Collision,
    RoadExit,
    TimeToCollision,
    LateralClearance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub step: usize,
    pub kind: ViolationKind,
    /// `None` for road exits.
    pub obstacle_id: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObstacleFlags {
    pub collision: bool,
    pub ttc_violation: bool,
    pub lateral_violation: bool,
}

impl ObstacleFlags {
    pub fn any(&self) -> bool {
        self.collision || self.ttc_violation || self.lateral_violation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFlags {
    pub step: usize,
    pub road_exit: bool,
    /// One entry per obstacle, in input order.
    pub obstacles: Vec<ObstacleFlags>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub obstacle_ids: Vec<u64>,
    pub steps: Vec<StepFlags>,
    pub unsafe_plan: bool,
    pub high_risk: bool,
    pub first_violation: Option<Violation>,
}

impl SafetyReport {
    pub fn is_safe(&self) -> bool {
        !self.unsafe_plan && !self.high_risk
    }

    /// Ids of obstacles with at least one flag, in input order.
    pub fn flagged_obstacles(&self) -> Vec<u64> {
        self.obstacle_ids
            .iter()
            .enumerate()
            .filter(|(j, _)| self.steps.iter().any(|s| s.obstacles[*j].any()))
            .map(|(_, id)| *id)
            .collect()
    }

    pub fn road_exit(&self) -> bool {
        self.steps.iter().any(|s| s.road_exit)
    }

    pub fn collision(&self) -> bool {
        self.steps.iter().any(|s| s.obstacles.iter().any(|o| o.collision))
    }
}

/// Verifies `trajectory` (index 0 is the current state) against constant-velocity
/// predictions of `obstacles` over steps `1..=M`.
///
/// The time-to-collision check applies to obstacles ahead whose lateral
/// clearance is below the minimum, i.e. vehicles actually in the ego's path;
/// the lateral-clearance check applies while the longitudinal extents overlap,
/// i.e. vehicles alongside.
pub fn verify(
    trajectory: &[VehicleState],
    params: &VehicleParams,
    obstacles: &[ObstacleObservation],
    road: &RoadGeometry,
    config: &SafetyConfig,
) -> Result<SafetyReport, SafetyError> {
    config.validate()?;
    let steps = config.steps();
    if trajectory.len() < steps + 1 {
        return Err(SafetyError::InvalidArgument(format!(
            "trajectory has {} states, verification needs {}",
            trajectory.len(),
            steps + 1
        )));
    }

    let road_width = road.width();
    let mut report = SafetyReport {
        obstacle_ids: obstacles.iter().map(|o| o.id).collect(),
        steps: Vec::with_capacity(steps),
        unsafe_plan: false,
        high_risk: false,
        first_violation: None,
    };
    let record = |step: usize, kind: ViolationKind, id: Option<u64>, first: &mut Option<Violation>| {
        if first.is_none() {
            *first = Some(Violation {
                step,
                kind,
                obstacle_id: id,
            });
        }
    };

    for m in 1..=steps {
        let ego = &trajectory[m];
        let ego_box = BoundingBox::new(ego.x, ego.y, params.length, params.width);
        let road_exit = ego.y - ego_box.half_width < 0.0 || ego.y + ego_box.half_width > road_width;
        if road_exit {
            report.unsafe_plan = true;
            record(m, ViolationKind::RoadExit, None, &mut report.first_violation);
        }

        let mut flags = Vec::with_capacity(obstacles.len());
        for obs in obstacles {
            let p = predict_obstacle(Vector2::new(obs.x, obs.y), Vector2::new(obs.vx, obs.vy), m, config.dt);
            let obs_box = BoundingBox::new(p[0], p[1], obs.length, obs.width);
            let collision = boxes_intersect(&ego_box, &obs_box);
            let clearance = lateral_clearance(ego.y, p[1], params.width, obs.width);
            let in_path = clearance < config.lateral_min;
            let ttc_violation =
                in_path && p[0] > ego.x && ttc(ego.x, ego.vx, ego_box.half_length, p[0], obs.vx, obs_box.half_length) < config.ttc_min;
            let lateral_violation = in_path && ego_box.overlaps_longitudinally(&obs_box);

            if collision {
                report.unsafe_plan = true;
                record(m, ViolationKind::Collision, Some(obs.id), &mut report.first_violation);
            }
            if ttc_violation {
                report.high_risk = true;
                record(m, ViolationKind::TimeToCollision, Some(obs.id), &mut report.first_violation);
            }
            if lateral_violation {
                report.high_risk = true;
                record(m, ViolationKind::LateralClearance, Some(obs.id), &mut report.first_violation);
            }
            flags.push(ObstacleFlags {
                collision,
                ttc_violation,
                lateral_violation,
            });
        }
        report.steps.push(StepFlags {
            step: m,
            road_exit,
            obstacles: flags,
        });
    }
    Ok(report)
}
