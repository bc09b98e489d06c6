//! Finite-horizon optimal control problem: stage cost, derivatives, total cost.

use std::ops::AddAssign;

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ControlInput, RoadGeometry, VehicleParams, VehicleState};
use crate::potential::{build_sigma_x, phi, phi_axis_sensitivity, phi_derivatives, ObstacleEllipse};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OcpError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    /// Longitudinal control effort.
    pub p1: f64,
    /// Lateral control effort.
    pub p2: f64,
    /// Speed tracking.
    pub p3: f64,
    /// Lateral speed damping.
    pub p4: f64,
    pub v_des: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            p1: 0.5,
            p2: 0.5,
            p3: 1.0,
            p4: 2.0,
            v_des: 25.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<(), OcpError> {
        let w = [self.p1, self.p2, self.p3, self.p4];
        if w.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) || w.iter().all(|p| *p == 0.0) || !self.v_des.is_finite() {
            return Err(OcpError::InvalidArgument(format!("invalid cost weights {self:?}")));
        }
        Ok(())
    }
}

/// One surrounding vehicle as seen by the planner: its center at every horizon
/// step plus what the time-gap policy needs to size its ellipse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleTrack {
    pub id: u64,
    /// Center at stage `k`, one entry per horizon step.
    pub centers: Vec<(f64, f64)>,
    pub vx: f64,
    pub length: f64,
    pub sigma_y: f64,
    pub weight: f64,
    pub tau: f64,
}

impl ObstacleTrack {
    /// Constant-velocity track over `horizon` steps starting at the current position.
    #[allow(clippy::too_many_arguments)]
    pub fn constant_velocity(
        id: u64,
        position: (f64, f64),
        velocity: (f64, f64),
        length: f64,
        sigma_y: f64,
        weight: f64,
        tau: f64,
        horizon: usize,
        dt: f64,
    ) -> Self {
        let centers = (0..horizon)
            .map(|k| {
                let t = k as f64 * dt;
                (position.0 + t * velocity.0, position.1 + t * velocity.1)
            })
            .collect();
        Self {
            id,
            centers,
            vx: velocity.0,
            length,
            sigma_y,
            weight,
            tau,
        }
    }

    /// Ellipse at stage `k` sized for the given ego state.
    pub fn ellipse(&self, k: usize, ego: &VehicleState) -> ObstacleEllipse {
        let (cx, cy) = self.centers[k];
        ObstacleEllipse {
            center_x: cx,
            center_y: cy,
            sigma_x: build_sigma_x(ego, cx, self.vx, self.tau, self.length),
            sigma_y: self.sigma_y,
            weight: self.weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpProblem {
    pub horizon: usize,
    pub initial: VehicleState,
    pub weights: CostWeights,
    pub obstacles: Vec<ObstacleTrack>,
    pub params: VehicleParams,
    pub road: RoadGeometry,
}

impl OcpProblem {
    pub fn new(
        horizon: usize,
        initial: VehicleState,
        weights: CostWeights,
        obstacles: Vec<ObstacleTrack>,
        params: VehicleParams,
        road: RoadGeometry,
    ) -> Result<Self, OcpError> {
        if horizon == 0 {
            return Err(OcpError::InvalidArgument("horizon must be at least one step".into()));
        }
        if !initial.is_finite() {
            return Err(OcpError::InvalidArgument(format!("non-finite initial state {initial:?}")));
        }
        weights.validate()?;
        params.validate().map_err(|e| OcpError::InvalidArgument(e.to_string()))?;
        for o in &obstacles {
            if o.centers.len() != horizon {
                return Err(OcpError::InvalidArgument(format!(
                    "obstacle {} has {} centers, horizon is {horizon}",
                    o.id,
                    o.centers.len()
                )));
            }
            if !(o.weight > 0.0 && o.sigma_y > 0.0 && o.length > 0.0 && o.tau > 0.0) {
                return Err(OcpError::InvalidArgument(format!("invalid obstacle parameters for {}", o.id)));
            }
        }
        Ok(Self {
            horizon,
            initial,
            weights,
            obstacles,
            params,
            road,
        })
    }

    /// Obstacle-free problem with default vehicle and road.
    pub fn free(horizon: usize, initial: VehicleState, weights: CostWeights) -> Result<Self, OcpError> {
        Self::new(
            horizon,
            initial,
            weights,
            Vec::new(),
            VehicleParams::default(),
            RoadGeometry::default(),
        )
    }

    /// Stage-`k` ellipses with semi-axes sized for `ego`.
    pub fn ellipses_at(&self, k: usize, ego: &VehicleState) -> Vec<ObstacleEllipse> {
        self.obstacles.iter().map(|o| o.ellipse(k, ego)).collect()
    }

    /// Multiplies the potential weight of the obstacle with `id`.
    pub fn scale_obstacle_weight(&mut self, id: u64, factor: f64) {
        for o in self.obstacles.iter_mut().filter(|o| o.id == id) {
            o.weight *= factor;
        }
    }
}

/// Stage cost with the ellipses given explicitly.
pub fn stage_cost_frozen(weights: &CostWeights, ellipses: &[ObstacleEllipse], state: &VehicleState, u: &ControlInput) -> f64 {
    let dv = state.vx - weights.v_des;
    let quadratic = weights.p1 * u.ux * u.ux + weights.p2 * u.uy * u.uy + weights.p3 * dv * dv + weights.p4 * state.vy * state.vy;
    let potential: f64 = ellipses.iter().map(|e| e.weight * phi(e, state.x, state.y)).sum();
    quadratic + potential
}

/// Stage cost at step `k`. Ellipse semi-axes follow the time-gap policy at `state`.
pub fn stage_cost(problem: &OcpProblem, k: usize, state: &VehicleState, u: &ControlInput) -> f64 {
    stage_cost_frozen(&problem.weights, &problem.ellipses_at(k, state), state, u)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageDerivatives {
    pub lx: Vector4<f64>,
    pub lu: Vector2<f64>,
    pub lxx: Matrix4<f64>,
    pub luu: Matrix2<f64>,
    pub lux: Matrix2x4<f64>,
    /// Some potential was evaluated at its center.
    pub singular: bool,
}

pub fn stage_derivatives_frozen(
    weights: &CostWeights,
    ellipses: &[ObstacleEllipse],
    state: &VehicleState,
    u: &ControlInput,
) -> StageDerivatives {
    let mut lx = Vector4::new(0.0, 0.0, 2.0 * weights.p3 * (state.vx - weights.v_des), 2.0 * weights.p4 * state.vy);
    let mut lxx = Matrix4::zeros();
    lxx[(2, 2)] = 2.0 * weights.p3;
    lxx[(3, 3)] = 2.0 * weights.p4;
    let mut singular = false;
    for e in ellipses {
        let d = phi_derivatives(e, state.x, state.y);
        singular |= d.singular;
        lx[0] += e.weight * d.gradient[0];
        lx[1] += e.weight * d.gradient[1];
        lxx.fixed_view_mut::<2, 2>(0, 0).add_assign(e.weight * d.hessian);
    }
    StageDerivatives {
        lx,
        lu: Vector2::new(2.0 * weights.p1 * u.ux, 2.0 * weights.p2 * u.uy),
        lxx,
        luu: Matrix2::new(2.0 * weights.p1, 0.0, 0.0, 2.0 * weights.p2),
        lux: Matrix2x4::zeros(),
        singular,
    }
}

/// Analytic derivatives of the stage cost at `(state, u)`.
///
/// Adds to [`stage_derivatives_frozen`] the terms from the time-gap axis, which
/// grows with `v_x` as `σx = v_x τ + L` while the ego is behind the obstacle.
pub fn stage_cost_derivatives(problem: &OcpProblem, k: usize, state: &VehicleState, u: &ControlInput) -> StageDerivatives {
    let ellipses = problem.ellipses_at(k, state);
    let mut d = stage_derivatives_frozen(&problem.weights, &ellipses, state, u);
    for (track, e) in problem.obstacles.iter().zip(&ellipses) {
        if state.x > e.center_x {
            continue;
        }
        let a = phi_axis_sensitivity(e, state.x, state.y);
        let tau = track.tau;
        d.lx[2] += e.weight * tau * a.d_sigma;
        d.lxx[(2, 2)] += e.weight * tau * tau * a.d_sigma_sigma;
        for i in 0..2 {
            let cross = e.weight * tau * a.d_sigma_position[i];
            d.lxx[(i, 2)] += cross;
            d.lxx[(2, i)] += cross;
        }
    }
    d
}

/// Sum of stage costs over the horizon.
pub fn total_cost(problem: &OcpProblem, states: &[VehicleState], controls: &[ControlInput]) -> Result<f64, OcpError> {
    if controls.len() != problem.horizon || states.len() != problem.horizon + 1 {
        return Err(OcpError::InvalidArgument(format!(
            "expected {} controls and {} states, got {} and {}",
            problem.horizon,
            problem.horizon + 1,
            controls.len(),
            states.len()
        )));
    }
    Ok(controls
        .iter()
        .zip(states)
        .enumerate()
        .map(|(k, (u, s))| stage_cost(problem, k, s, u))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::step;
    use proptest::prelude::*;

    fn weights(p1: f64, p2: f64, p3: f64, p4: f64, v_des: f64) -> CostWeights {
        CostWeights { p1, p2, p3, p4, v_des }
    }

    fn one_obstacle_problem(w: CostWeights, at: (f64, f64), horizon: usize) -> OcpProblem {
        let track = ObstacleTrack::constant_velocity(7, at, (0.0, 0.0), 4.5, 3.2, 50.0, 1.0, horizon, 0.1);
        OcpProblem::new(
            horizon,
            VehicleState::default(),
            w,
            vec![track],
            VehicleParams::default(),
            RoadGeometry::default(),
        )
        .unwrap()
    }

    #[test]
    fn stage_cost_examples() {
        let p = OcpProblem::free(3, VehicleState::default(), weights(1.0, 1.0, 1.0, 1.0, 15.0)).unwrap();
        let s = VehicleState::new(0.0, 5.0, 15.0, 0.0);
        assert_eq!(stage_cost(&p, 0, &s, &ControlInput::ZERO), 0.0);

        let p = OcpProblem::free(3, VehicleState::default(), weights(0.0, 0.0, 1.0, 0.0, 15.0)).unwrap();
        let s = VehicleState::new(0.0, 5.0, 12.0, 0.0);
        assert!((stage_cost(&p, 0, &s, &ControlInput::ZERO) - 9.0).abs() < 1e-12);

        let p = one_obstacle_problem(weights(0.0, 0.0, 1.0, 0.0, 10.0), (20.0, 4.8), 3);
        let s = VehicleState::new(20.0, 4.8, 10.0, 0.0);
        assert!((stage_cost(&p, 0, &s, &ControlInput::ZERO) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn obstacle_free_derivatives_closed_form() {
        let w = weights(0.5, 0.7, 1.3, 2.0, 20.0);
        let p = OcpProblem::free(2, VehicleState::default(), w).unwrap();
        let s = VehicleState::new(1.0, 4.0, 17.0, 0.3);
        let u = ControlInput::new(1.2, -0.4);
        let d = stage_cost_derivatives(&p, 0, &s, &u);
        assert!((d.lu - Vector2::new(2.0 * 0.5 * 1.2, 2.0 * 0.7 * -0.4)).amax() < 1e-15);
        let mut expect = Matrix4::zeros();
        expect[(2, 2)] = 2.6;
        expect[(3, 3)] = 4.0;
        assert_eq!(d.lxx, expect);
        assert_eq!(d.luu, Matrix2::new(1.0, 0.0, 0.0, 1.4));
        assert_eq!(d.lux, Matrix2x4::zeros());
        assert!((d.lx[2] - 2.0 * 1.3 * -3.0).abs() < 1e-12);
    }

    #[test]
    fn potential_only_gradient() {
        // p3 must be positive for the weights to be valid; put the ego at v_des so
        // that term has no gradient.
        let p = one_obstacle_problem(weights(0.0, 0.0, 1.0, 0.0, 10.0), (30.0, 4.8), 2);
        let s = VehicleState::new(22.0, 5.5, 10.0, 0.0);
        let d = stage_cost_derivatives(&p, 0, &s, &ControlInput::ZERO);
        let e = p.ellipses_at(0, &s)[0];
        let g = phi_derivatives(&e, s.x, s.y).gradient * 50.0;
        assert!((d.lx[0] - g[0]).abs() < 1e-14 && (d.lx[1] - g[1]).abs() < 1e-14);
    }

    #[test]
    fn total_cost_checks_lengths() {
        let p = OcpProblem::free(3, VehicleState::default(), CostWeights::default()).unwrap();
        let r = total_cost(&p, &[VehicleState::default(); 3], &[ControlInput::ZERO; 3]);
        assert!(matches!(r, Err(OcpError::InvalidArgument(_))));
    }

    #[test]
    fn total_cost_single_step_and_scaling() {
        let p = one_obstacle_problem(weights(0.0, 0.0, 1.0, 0.0, 0.0), (6.0, 1.0), 1);
        let s0 = VehicleState::new(2.0, 1.5, 0.0, 0.0);
        let u = ControlInput::new(0.5, 0.0);
        let s1 = step(&s0, &u, 0.1).unwrap();
        let j = total_cost(&p, &[s0, s1], &[u]).unwrap();
        assert_eq!(j, stage_cost(&p, 0, &s0, &u));

        let mut doubled = p.clone();
        doubled.scale_obstacle_weight(7, 2.0);
        let j2 = total_cost(&doubled, &[s0, s1], &[u]).unwrap();
        // speed term is zero since v_x = v_des = 0
        assert!((j2 - 2.0 * j).abs() < 1e-12);
    }

    #[test]
    fn total_cost_independent_accumulation() {
        let w = weights(0.5, 0.5, 1.0, 2.0, 12.0);
        let p = one_obstacle_problem(w, (8.0, 5.0), 3);
        let controls = [
            ControlInput::new(1.0, 0.5),
            ControlInput::new(-0.5, 0.0),
            ControlInput::new(0.0, -0.5),
        ];
        let mut states = vec![VehicleState::new(0.0, 4.0, 10.0, 0.0)];
        for u in &controls {
            let s = step(states.last().unwrap(), u, 0.1).unwrap();
            states.push(s);
        }
        let mut expected = 0.0;
        for k in 0..3 {
            let s = states[k];
            let u = controls[k];
            // ego behind the stationary obstacle at every step: sigma_x = v_x * tau + L
            let sx = s.vx * 1.0 + 4.5;
            let r = (((s.x - 8.0) / sx).powi(2) + ((s.y - 5.0) / 3.2).powi(2)).sqrt();
            expected += 0.5 * u.ux * u.ux + 0.5 * u.uy * u.uy + (s.vx - 12.0).powi(2) + 2.0 * s.vy * s.vy + 50.0 * (-r).exp();
        }
        let j = total_cost(&p, &states, &controls).unwrap();
        assert!((j - expected).abs() < 1e-12, "{j} vs {expected}");
    }

    #[test]
    fn obstacle_free_problem_is_convex() {
        let w = CostWeights::default();
        let p = OcpProblem::free(1, VehicleState::default(), w).unwrap();
        let d = stage_cost_derivatives(&p, 0, &VehicleState::new(0.0, 3.0, 11.0, 0.2), &ControlInput::new(0.3, 0.1));
        assert!(d.lxx.symmetric_eigenvalues().iter().all(|l| *l >= 0.0));
        assert!(d.luu.symmetric_eigenvalues().iter().all(|l| *l >= 0.0));
    }

    #[test]
    fn rejects_bad_problem() {
        let w = weights(0.0, 0.0, 0.0, 0.0, 10.0);
        assert!(OcpProblem::free(3, VehicleState::default(), w).is_err());
        assert!(OcpProblem::free(0, VehicleState::default(), CostWeights::default()).is_err());
        let track = ObstacleTrack::constant_velocity(1, (0.0, 0.0), (0.0, 0.0), 4.5, 3.2, 50.0, 1.0, 2, 0.1);
        let r = OcpProblem::new(
            3,
            VehicleState::default(),
            CostWeights::default(),
            vec![track],
            VehicleParams::default(),
            RoadGeometry::default(),
        );
        assert!(r.is_err());
    }

    proptest! {
        #[test]
        fn total_cost_nonnegative(
            ux in -5.0..3.0f64, uy in -3.0..3.0f64, vx in 0.0..30.0f64, y in 1.0..11.0f64, ox in -30.0..30.0f64,
        ) {
            let p = one_obstacle_problem(CostWeights::default(), (ox, 6.0), 2);
            let s0 = VehicleState::new(0.0, y, vx, 0.0);
            let u = ControlInput::new(ux, uy);
            let s1 = step(&s0, &u, 0.1).unwrap();
            let s2 = step(&s1, &u, 0.1).unwrap();
            prop_assert!(total_cost(&p, &[s0, s1, s2], &[u, u]).unwrap() >= 0.0);
        }

        // Ego behind the obstacle, so the time-gap axis moves with v_x and the
        // full derivatives must match differences of the true stage cost.
        #[test]
        fn derivatives_match_stage_cost_differences(
            gap in 2.0..60.0f64, y in 1.0..11.0f64, vx in 0.5..30.0f64, vy in -1.0..1.0f64,
        ) {
            let p = one_obstacle_problem(CostWeights::default(), (gap, 6.0), 1);
            let z0 = [0.0, y, vx, vy];
            let at = |z: [f64; 4]| VehicleState::new(z[0], z[1], z[2], z[3]);
            let u = ControlInput::new(0.4, -0.2);
            let cost = |z: [f64; 4]| stage_cost(&p, 0, &at(z), &u);
            let grad = |z: [f64; 4]| stage_cost_derivatives(&p, 0, &at(z), &u).lx;
            let d = stage_cost_derivatives(&p, 0, &at(z0), &u);
            let h = 1e-5;
            for i in 0..4 {
                let (mut zp, mut zm) = (z0, z0);
                zp[i] += h;
                zm[i] -= h;
                let fd = (cost(zp) - cost(zm)) / (2.0 * h);
                prop_assert!((d.lx[i] - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "lx[{}] {} vs {}", i, d.lx[i], fd);
                let column = (grad(zp) - grad(zm)) / (2.0 * h);
                for j in 0..4 {
                    prop_assert!((d.lxx[(j, i)] - column[j]).abs() <= 1e-5 * (1.0 + column[j].abs()), "lxx[{},{}]", j, i);
                }
            }
        }
    }
}
