//! Point-mass vehicle model with longitudinal and lateral double integrators.
//!
//! State is `[x, y, v_x, v_y]`, control is `[u_x, u_y]`. Both are held constant
//! over one step of duration `dt`.

use nalgebra::{Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// The comfort cap and the road-boundary bounds do not intersect. Carries the
    /// boundary bounds before the cap was applied.
    #[error("degenerate lateral bounds: boundary interval [{lower_unclipped}, {upper_unclipped}] misses the comfort cap")]
    DegenerateBounds { lower_unclipped: f64, upper_unclipped: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl VehicleState {
    pub const fn new(x: f64, y: f64, vx: f64, vy: f64) -> Self {
        Self { x, y, vx, vy }
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.x, self.y, self.vx, self.vy)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.vx.is_finite() && self.vy.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub ux: f64,
    pub uy: f64,
}

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput { ux: 0.0, uy: 0.0 };

    pub const fn new(ux: f64, uy: f64) -> Self {
        Self { ux, uy }
    }

    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.ux, self.uy)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v[0], v[1])
    }

    pub fn is_finite(&self) -> bool {
        self.ux.is_finite() && self.uy.is_finite()
    }
}

/// Straight road with `lane_count` lanes of equal width. Lateral coordinate `y`
/// runs from 0 (right edge) to `width()` (left edge).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadGeometry {
    pub lane_width: f64,
    pub lane_count: usize,
    pub segment_length: f64,
}

impl RoadGeometry {
    pub fn new(lane_width: f64, lane_count: usize, segment_length: f64) -> Result<Self, DynamicsError> {
        if !(lane_width > 0.0 && lane_width.is_finite()) || lane_count == 0 || !(segment_length > 0.0) {
            return Err(DynamicsError::InvalidArgument(format!(
                "road geometry must be positive (lane_width={lane_width}, lane_count={lane_count}, segment_length={segment_length})"
            )));
        }
        Ok(Self {
            lane_width,
            lane_count,
            segment_length,
        })
    }

    /// Total road width `r_w`.
    pub fn width(&self) -> f64 {
        self.lane_width * self.lane_count as f64
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        (lane as f64 + 0.5) * self.lane_width
    }

    /// Lane containing lateral position `y`, clamped to the road.
    pub fn lane_of(&self, y: f64) -> usize {
        let lane = (y / self.lane_width).floor();
        if lane < 0.0 {
            0
        } else {
            (lane as usize).min(self.lane_count - 1)
        }
    }
}

impl Default for RoadGeometry {
    fn default() -> Self {
        Self {
            lane_width: 3.2,
            lane_count: 4,
            segment_length: 2500.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub length: f64,
    pub width: f64,
    pub ux_max: f64,
    /// Maximum deceleration, negative.
    pub ux_min: f64,
    /// Symmetric lateral acceleration cap.
    pub uy_cap: f64,
    /// Step duration.
    pub dt: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            length: 4.5,
            width: 1.8,
            ux_max: 3.0,
            ux_min: -6.0,
            uy_cap: 3.0,
            dt: 0.1,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let ok = self.length > 0.0 && self.width > 0.0 && self.dt > 0.0 && self.ux_min < 0.0 && self.ux_max > 0.0 && self.uy_cap > 0.0;
        if ok {
            Ok(())
        } else {
            Err(DynamicsError::InvalidArgument(format!("invalid vehicle parameters {self:?}")))
        }
    }
}

/// State transition matrix of the discrete double integrator.
pub fn state_matrix(dt: f64) -> Matrix4<f64> {
    #[rustfmt::skip]
    let a = Matrix4::new(
        1.0, 0.0, dt, 0.0,
        0.0, 1.0, 0.0, dt,
        0.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
    );
    a
}

/// Control input matrix of the discrete double integrator.
pub fn input_matrix(dt: f64) -> Matrix4x2<f64> {
    let h = 0.5 * dt * dt;
    #[rustfmt::skip]
    let b = Matrix4x2::new(
        h, 0.0,
        0.0, h,
        dt, 0.0,
        0.0, dt,
    );
    b
}

/// Advances the state by one step.
pub fn step(state: &VehicleState, u: &ControlInput, dt: f64) -> Result<VehicleState, DynamicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::InvalidArgument(format!("step duration must be positive, got {dt}")));
    }
    if !state.is_finite() || !u.is_finite() {
        return Err(DynamicsError::InvalidArgument(format!(
            "non-finite input: state={state:?}, control={u:?}"
        )));
    }
    Ok(step_unchecked(state, u, dt))
}

#[inline]
pub(crate) fn step_unchecked(s: &VehicleState, u: &ControlInput, dt: f64) -> VehicleState {
    let h = 0.5 * dt * dt;
    VehicleState {
        x: s.x + s.vx * dt + h * u.ux,
        y: s.y + s.vy * dt + h * u.uy,
        vx: s.vx + dt * u.ux,
        vy: s.vy + dt * u.uy,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub lower: ControlInput,
    pub upper: ControlInput,
}

impl ControlBounds {
    pub fn clip(&self, u: &ControlInput) -> ControlInput {
        ControlInput::new(u.ux.clamp(self.lower.ux, self.upper.ux), u.uy.clamp(self.lower.uy, self.upper.uy))
    }

    pub fn contains(&self, u: &ControlInput, tol: f64) -> bool {
        u.ux >= self.lower.ux - tol && u.ux <= self.upper.ux + tol && u.uy >= self.lower.uy - tol && u.uy <= self.upper.uy + tol
    }
}

/// Lateral bounds that place the ego exactly on the left/right boundary line after
/// one step, before the comfort cap. Returns `(lower, upper)`.
pub fn boundary_lateral_bounds(state: &VehicleState, params: &VehicleParams, road: &RoadGeometry) -> (f64, f64) {
    let dt = params.dt;
    let y_left = road.width() - 0.5 * params.width;
    let y_right = 0.5 * params.width;
    let upper = 2.0 * (y_left - state.y - state.vy * dt) / (dt * dt);
    let lower = 2.0 * (y_right - state.y - state.vy * dt) / (dt * dt);
    (lower, upper)
}

/// Longitudinal lower bound: never reverse within one step, never exceed the
/// braking capability.
pub fn longitudinal_lower_bound(state: &VehicleState, params: &VehicleParams) -> f64 {
    (-state.vx / params.dt).max(params.ux_min)
}

/// State-dependent control bounds.
///
/// Fails with [`DynamicsError::DegenerateBounds`] when the vehicle moves toward a
/// boundary faster than the lateral cap can stop it.
pub fn control_bounds(state: &VehicleState, params: &VehicleParams, road: &RoadGeometry) -> Result<ControlBounds, DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::InvalidArgument(format!("non-finite state {state:?}")));
    }
    let lower_x = longitudinal_lower_bound(state, params);
    let upper_x = params.ux_max;
    if lower_x > upper_x {
        return Err(DynamicsError::InvalidArgument(format!(
            "longitudinal bounds cross at v_x={} (lower {lower_x} > upper {upper_x})",
            state.vx
        )));
    }
    let (ly, uy) = boundary_lateral_bounds(state, params, road);
    let lower_y = ly.max(-params.uy_cap);
    let upper_y = uy.min(params.uy_cap);
    if lower_y > upper_y {
        return Err(DynamicsError::DegenerateBounds {
            lower_unclipped: ly,
            upper_unclipped: uy,
        });
    }
    Ok(ControlBounds {
        lower: ControlInput::new(lower_x, lower_y),
        upper: ControlInput::new(upper_x, upper_y),
    })
}

/// Like [`control_bounds`] but never fails on a boundary pinch: the lateral
/// interval collapses onto the cap value that pushes back toward the road.
pub fn control_bounds_saturated(state: &VehicleState, params: &VehicleParams, road: &RoadGeometry) -> ControlBounds {
    match control_bounds(state, params, road) {
        Ok(b) => b,
        Err(DynamicsError::DegenerateBounds { lower_unclipped, .. }) => {
            let lower_x = longitudinal_lower_bound(state, params).min(params.ux_max);
            // Pinched on the right edge needs +cap, on the left edge -cap.
            let uy = if lower_unclipped > params.uy_cap {
                params.uy_cap
            } else {
                -params.uy_cap
            };
            ControlBounds {
                lower: ControlInput::new(lower_x, uy),
                upper: ControlInput::new(params.ux_max, uy),
            }
        }
        Err(DynamicsError::InvalidArgument(_)) => {
            let lower_x = longitudinal_lower_bound(state, params).min(params.ux_max);
            ControlBounds {
                lower: ControlInput::new(lower_x, -params.uy_cap),
                upper: ControlInput::new(params.ux_max, params.uy_cap),
            }
        }
    }
}

/// Rolls out a control sequence from `initial`, clipping each control to the
/// state-dependent bounds. Returns the clipped controls and the `len + 1` states.
pub fn rollout_clipped(
    initial: &VehicleState,
    controls: &[ControlInput],
    params: &VehicleParams,
    road: &RoadGeometry,
) -> (Vec<ControlInput>, Vec<VehicleState>) {
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut applied = Vec::with_capacity(controls.len());
    let mut s = *initial;
    states.push(s);
    for u in controls {
        let u = control_bounds_saturated(&s, params, road).clip(u);
        s = step_unchecked(&s, &u, params.dt);
        applied.push(u);
        states.push(s);
    }
    (applied, states)
}
