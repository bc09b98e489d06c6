//! Box-constrained differential dynamic programming.
//!
//! Each iteration runs a regularized backward pass that solves a small
//! box-constrained QP per stage, then a line-searched forward rollout. The
//! regularization `μ` grows by `γ` on backward failures and shrinks by `γ` on
//! accepted forward passes; reaching `μ_max` terminates the solve.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, RowVector4, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    boundary_lateral_bounds, control_bounds_saturated, input_matrix, rollout_clipped, state_matrix, step_unchecked, ControlInput,
    VehicleState,
};
use crate::ocp::{stage_cost_derivatives, total_cost, OcpProblem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DdpError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Why a backward pass could not produce a feedback law.
#[derive(Debug, Clone, Copy, PartialEq, Error, Serialize, Deserialize)]
pub enum BackwardFailure {
    #[error("control Hessian not positive definite on the free subspace at step {step}")]
    NotPositiveDefinite { step: usize },
    #[error("active-set iteration cap exceeded at step {step}")]
    ActiveSetCap { step: usize },
    #[error("non-finite value function at step {step}")]
    NonFinite { step: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum QpFailure {
    #[error("Hessian not positive definite on the free subspace")]
    NotPositiveDefinite,
    #[error("active-set change cap exceeded")]
    ActiveSetCap,
    #[error("invalid box: lower > upper or non-finite data")]
    InvalidBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub mu_min: f64,
    pub mu_max: f64,
    /// Regularization increase/decrease factor.
    pub gamma: f64,
    /// Line-search ladder, strictly decreasing in (0, 1].
    pub step_sizes: Vec<f64>,
    /// Convergence threshold on the norm of the control update.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Cap on working-set changes in one box QP.
    pub max_active_set_changes: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mu_min: 1e-6,
            mu_max: 1e6,
            gamma: 5.0,
            step_sizes: vec![1.0, 0.5, 0.1, 0.05, 0.01],
            tolerance: 1e-3,
            max_iterations: 100,
            max_active_set_changes: 20,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), DdpError> {
        let ladder_ok = !self.step_sizes.is_empty()
            && self.step_sizes.iter().all(|a| *a > 0.0 && *a <= 1.0)
            && self.step_sizes.windows(2).all(|w| w[0] > w[1]);
        if !(self.mu_min > 0.0 && self.mu_min < self.mu_max && self.gamma > 1.0 && self.tolerance > 0.0 && ladder_ok) {
            return Err(DdpError::InvalidArgument(format!("invalid solver configuration {self:?}")));
        }
        Ok(())
    }
}

/// Which side of its box a control component sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundState {
    Free,
    Lower,
    Upper,
}

impl BoundState {
    pub fn is_active(self) -> bool {
        self != BoundState::Free
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxQpSolution {
    pub delta_u: Vector2<f64>,
    /// Inverse of the Hessian restricted to the free components, embedded with
    /// zero rows/columns for active ones.
    pub free_inverse: Matrix2<f64>,
    pub active: [BoundState; 2],
    /// Multipliers of the active bounds (zero for free components).
    pub multipliers: Vector2<f64>,
    pub working_set_changes: usize,
}

/// Minimizes `½ δuᵀ H δu + gᵀ δu` over `lower ≤ δu ≤ upper`.
///
/// Primal active-set method: starting from the feasible point closest to the
/// origin, take Newton steps on the free components, stop at the first blocking
/// bound and add it to the working set; once the Newton step vanishes, release
/// the bound with the most negative multiplier, if any.
pub fn solve_box_qp(
    h: &Matrix2<f64>,
    g: &Vector2<f64>,
    lower: &Vector2<f64>,
    upper: &Vector2<f64>,
    max_changes: usize,
) -> Result<BoxQpSolution, QpFailure> {
    let finite = h
        .iter()
        .chain(g.iter())
        .chain(lower.iter())
        .chain(upper.iter())
        .all(|v| v.is_finite());
    if !finite || lower[0] > upper[0] || lower[1] > upper[1] {
        return Err(QpFailure::InvalidBox);
    }

    let mut x = Vector2::new(0.0f64.clamp(lower[0], upper[0]), 0.0f64.clamp(lower[1], upper[1]));
    let mut active = [BoundState::Free; 2];
    let mut changes = 0usize;
    // Each pass either moves, fixes a component or frees one.
    let max_passes = 4 * (max_changes + 2);

    for _ in 0..max_passes {
        let grad = h * x + g;
        let p = newton_step(h, &grad, &active)?;
        let scale = 1.0 + x.amax();
        if p.amax() <= 1e-14 * scale {
            let (worst, worst_lambda) = worst_multiplier(&grad, &active, lower, upper);
            match worst {
                Some(i) if worst_lambda < -1e-12 * (1.0 + grad.amax()) => {
                    active[i] = BoundState::Free;
                    changes += 1;
                    if changes > max_changes {
                        return Err(QpFailure::ActiveSetCap);
                    }
                    continue;
                }
                _ => {
                    let free_inverse = free_inverse(h, &active)?;
                    let multipliers = Vector2::from_fn(|i, _| match active[i] {
                        BoundState::Free => 0.0,
                        BoundState::Lower => grad[i].max(0.0),
                        BoundState::Upper => (-grad[i]).max(0.0),
                    });
                    return Ok(BoxQpSolution {
                        delta_u: x,
                        free_inverse,
                        active,
                        multipliers,
                        working_set_changes: changes,
                    });
                }
            }
        }

        let mut alpha = 1.0;
        let mut blocking: Option<(usize, BoundState)> = None;
        for i in 0..2 {
            if active[i].is_active() {
                continue;
            }
            let (t, side) = if p[i] < 0.0 {
                ((lower[i] - x[i]) / p[i], BoundState::Lower)
            } else if p[i] > 0.0 {
                ((upper[i] - x[i]) / p[i], BoundState::Upper)
            } else {
                continue;
            };
            if t < alpha {
                alpha = t.max(0.0);
                blocking = Some((i, side));
            }
        }
        x += alpha * p;
        if let Some((i, side)) = blocking {
            x[i] = if side == BoundState::Lower { lower[i] } else { upper[i] };
            active[i] = side;
            changes += 1;
            if changes > max_changes {
                return Err(QpFailure::ActiveSetCap);
            }
        }
        x[0] = x[0].clamp(lower[0], upper[0]);
        x[1] = x[1].clamp(lower[1], upper[1]);
    }
    Err(QpFailure::ActiveSetCap)
}

fn newton_step(h: &Matrix2<f64>, grad: &Vector2<f64>, active: &[BoundState; 2]) -> Result<Vector2<f64>, QpFailure> {
    let free: Vec<usize> = (0..2).filter(|i| !active[*i].is_active()).collect();
    let mut p = Vector2::zeros();
    match free.as_slice() {
        [] => {}
        [i] => {
            let hii = h[(*i, *i)];
            if !(hii > 0.0) {
                return Err(QpFailure::NotPositiveDefinite);
            }
            p[*i] = -grad[*i] / hii;
        }
        _ => {
            let chol = h.cholesky().ok_or(QpFailure::NotPositiveDefinite)?;
            p = chol.solve(&(-grad));
        }
    }
    Ok(p)
}

fn free_inverse(h: &Matrix2<f64>, active: &[BoundState; 2]) -> Result<Matrix2<f64>, QpFailure> {
    let mut inv = Matrix2::zeros();
    match (active[0].is_active(), active[1].is_active()) {
        (true, true) => {}
        (false, true) => inv[(0, 0)] = 1.0 / h[(0, 0)],
        (true, false) => inv[(1, 1)] = 1.0 / h[(1, 1)],
        (false, false) => {
            inv = h.cholesky().ok_or(QpFailure::NotPositiveDefinite)?.inverse();
        }
    }
    Ok(inv)
}

/// Most negative multiplier among releasable active bounds.
fn worst_multiplier(grad: &Vector2<f64>, active: &[BoundState; 2], lower: &Vector2<f64>, upper: &Vector2<f64>) -> (Option<usize>, f64) {
    let mut worst = None;
    let mut worst_lambda = 0.0;
    for i in 0..2 {
        // a collapsed interval is an equality; its multiplier has either sign
        if lower[i] == upper[i] {
            continue;
        }
        let lambda = match active[i] {
            BoundState::Free => continue,
            BoundState::Lower => grad[i],
            BoundState::Upper => -grad[i],
        };
        if lambda < worst_lambda {
            worst_lambda = lambda;
            worst = Some(i);
        }
    }
    (worst, worst_lambda)
}

/// Quadratic model of the Q function around the nominal at one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QCoefficients {
    pub qx: Vector4<f64>,
    pub qu: Vector2<f64>,
    pub qxx: Matrix4<f64>,
    pub qux: Matrix2x4<f64>,
    pub quu: Matrix2<f64>,
}

/// Affine control update `δu = k_ff + (K_fb + X) δx` for one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackLaw {
    pub k_ff: Vector2<f64>,
    /// Feedback on free components; rows of active components are zero.
    pub k_fb: Matrix2x4<f64>,
    /// Sensitivity of each active bound to the state (rows of free components
    /// are zero). Keeps an active control on its state-dependent bound.
    pub bound_sensitivity: Matrix2x4<f64>,
    pub active: [BoundState; 2],
}

impl FeedbackLaw {
    pub fn gain(&self) -> Matrix2x4<f64> {
        self.k_fb + self.bound_sensitivity
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| a.is_active()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<VehicleState>,
    pub controls: Vec<ControlInput>,
    pub cost: f64,
}

impl Trajectory {
    /// Rolls out `controls` from the problem's initial state, clipping to bounds.
    pub fn rollout(problem: &OcpProblem, controls: &[ControlInput]) -> Result<Self, DdpError> {
        if controls.len() != problem.horizon {
            return Err(DdpError::InvalidArgument(format!(
                "expected {} controls, got {}",
                problem.horizon,
                controls.len()
            )));
        }
        if controls.iter().any(|u| !u.is_finite()) {
            return Err(DdpError::InvalidArgument("non-finite initial controls".into()));
        }
        let (controls, states) = rollout_clipped(&problem.initial, controls, &problem.params, &problem.road);
        let cost = total_cost(problem, &states, &controls).map_err(|e| DdpError::InvalidArgument(e.to_string()))?;
        Ok(Self { states, controls, cost })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPass {
    pub laws: Vec<FeedbackLaw>,
    pub q: Vec<QCoefficients>,
    /// `V_x` at stages `0..=K`.
    pub value_gradient: Vec<Vector4<f64>>,
    /// `V_xx` at stages `0..=K`.
    pub value_hessian: Vec<Matrix4<f64>>,
}

impl BackwardPass {
    pub fn active_count(&self) -> usize {
        self.laws.iter().map(FeedbackLaw::active_count).sum()
    }
}

/// Gradient of one active bound with respect to the state, evaluated at `state`.
fn bound_row(problem: &OcpProblem, state: &VehicleState, component: usize, side: BoundState) -> RowVector4<f64> {
    let p = &problem.params;
    let dt = p.dt;
    match (component, side) {
        (0, BoundState::Lower) if -state.vx / dt > p.ux_min => RowVector4::new(0.0, 0.0, -1.0 / dt, 0.0),
        (1, BoundState::Upper) | (1, BoundState::Lower) => {
            let (lo, hi) = boundary_lateral_bounds(state, p, &problem.road);
            let boundary_binds = match side {
                BoundState::Upper => hi < p.uy_cap && hi >= -p.uy_cap,
                _ => lo > -p.uy_cap && lo <= p.uy_cap,
            };
            if boundary_binds {
                RowVector4::new(0.0, -2.0 / (dt * dt), 0.0, -2.0 / dt)
            } else {
                RowVector4::zeros()
            }
        }
        _ => RowVector4::zeros(),
    }
}

/// Backward sweep from the last stage to the first around `nominal`.
pub fn backward_pass(problem: &OcpProblem, nominal: &Trajectory, mu: f64, max_changes: usize) -> Result<BackwardPass, BackwardFailure> {
    let horizon = problem.horizon;
    let a = state_matrix(problem.params.dt);
    let b = input_matrix(problem.params.dt);
    let at = a.transpose();
    let bt = b.transpose();

    let mut vx = Vector4::zeros();
    let mut vxx = Matrix4::zeros();
    let mut laws = vec![
        FeedbackLaw {
            k_ff: Vector2::zeros(),
            k_fb: Matrix2x4::zeros(),
            bound_sensitivity: Matrix2x4::zeros(),
            active: [BoundState::Free; 2],
        };
        horizon
    ];
    let mut qs = Vec::with_capacity(horizon);
    let mut value_gradient = vec![Vector4::zeros(); horizon + 1];
    let mut value_hessian = vec![Matrix4::zeros(); horizon + 1];

    for k in (0..horizon).rev() {
        let x = &nominal.states[k];
        let u = &nominal.controls[k];
        let d = stage_cost_derivatives(problem, k, x, u);

        let qx = d.lx + at * vx;
        let qu = d.lu + bt * vx;
        let mut qxx = d.lxx + at * vxx * a;
        let qux = d.lux + bt * vxx * a;
        let mut quu = d.luu + bt * vxx * b;
        qxx = 0.5 * (qxx + qxx.transpose());
        quu = 0.5 * (quu + quu.transpose());
        let quu_reg = quu + Matrix2::identity() * mu;

        let bounds = control_bounds_saturated(x, &problem.params, &problem.road);
        let lower = bounds.lower.to_vector() - u.to_vector();
        let upper = bounds.upper.to_vector() - u.to_vector();
        // the nominal is feasible up to rounding; keep the box non-empty
        let lower = Vector2::new(lower[0].min(upper[0]), lower[1].min(upper[1]));
        let qp = solve_box_qp(&quu_reg, &qu, &lower, &upper, max_changes).map_err(|e| match e {
            QpFailure::NotPositiveDefinite | QpFailure::InvalidBox => BackwardFailure::NotPositiveDefinite { step: k },
            QpFailure::ActiveSetCap => BackwardFailure::ActiveSetCap { step: k },
        })?;

        let mut sensitivity = Matrix2x4::zeros();
        for i in 0..2 {
            if qp.active[i].is_active() {
                sensitivity.set_row(i, &bound_row(problem, x, i, qp.active[i]));
            }
        }
        // Free rows: -H_ff⁻¹ (Q_ux + H_fa X_a) restricted to the free components.
        let mut k_fb = -qp.free_inverse * (qux + quu_reg * sensitivity);
        for i in 0..2 {
            if qp.active[i].is_active() {
                k_fb.set_row(i, &RowVector4::zeros());
            }
        }
        let law = FeedbackLaw {
            k_ff: qp.delta_u,
            k_fb,
            bound_sensitivity: sensitivity,
            active: qp.active,
        };

        let gain = law.gain();
        let kff = law.k_ff;
        let gt = gain.transpose();
        vx = qx + gt * quu * kff + gt * qu + qux.transpose() * kff;
        vxx = qxx + gt * quu * gain + gt * qux + qux.transpose() * gain;
        vxx = 0.5 * (vxx + vxx.transpose());
        if !vx.iter().chain(vxx.iter()).all(|v| v.is_finite()) {
            return Err(BackwardFailure::NonFinite { step: k });
        }
        value_gradient[k] = vx;
        value_hessian[k] = vxx;
        laws[k] = law;
        qs.push(QCoefficients { qx, qu, qxx, qux, quu });
    }
    qs.reverse();
    Ok(BackwardPass {
        laws,
        q: qs,
        value_gradient,
        value_hessian,
    })
}

/// Applies the feedback laws with step size `alpha`, clipping every control to
/// the bounds at the rolled-out state. Returns `None` on a non-finite rollout.
pub fn forward_pass(problem: &OcpProblem, nominal: &Trajectory, laws: &[FeedbackLaw], alpha: f64) -> Option<Trajectory> {
    let horizon = problem.horizon;
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    let mut x = problem.initial;
    states.push(x);
    for k in 0..horizon {
        let dx = x.to_vector() - nominal.states[k].to_vector();
        let law = &laws[k];
        let du = alpha * (law.k_ff + law.gain() * dx);
        let u = ControlInput::from_vector(&(nominal.controls[k].to_vector() + du));
        let u = control_bounds_saturated(&x, &problem.params, &problem.road).clip(&u);
        x = step_unchecked(&x, &u, problem.params.dt);
        if !x.is_finite() || !u.is_finite() {
            return None;
        }
        controls.push(u);
        states.push(x);
    }
    let cost = total_cost(problem, &states, &controls).ok()?;
    cost.is_finite().then_some(Trajectory { states, controls, cost })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverStatus {
    Converged,
    /// Iteration cap reached; the result holds the best trajectory found.
    MaxIterations,
    /// Regularization reached `μ_max`; the result holds the best trajectory found.
    IllConditioned,
}

/// One solver iteration, for traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub mu: f64,
    /// Accepted step size, if the line search succeeded.
    pub alpha: Option<f64>,
    pub active_bounds: usize,
    pub backward_attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverResult {
    pub controls: Vec<ControlInput>,
    pub states: Vec<VehicleState>,
    pub cost: f64,
    pub iterations: usize,
    pub status: SolverStatus,
    pub final_mu: f64,
    /// Initial cost followed by the cost after every accepted iteration.
    pub cost_log: Vec<f64>,
    /// Regularization used by every backward-pass attempt, in order.
    pub mu_trace: Vec<f64>,
    pub trace: Vec<IterationRecord>,
}

impl SolverResult {
    pub fn converged(&self) -> bool {
        self.status == SolverStatus::Converged
    }
}

fn control_change(a: &[ControlInput], b: &[ControlInput]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p.ux - q.ux).powi(2) + (p.uy - q.uy).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Runs constrained DDP from `initial_controls`.
///
/// Only malformed input is an error; non-convergence and ill-conditioning are
/// reported through [`SolverResult::status`] with the best trajectory found.
pub fn solve(problem: &OcpProblem, initial_controls: &[ControlInput], config: &SolverConfig) -> Result<SolverResult, DdpError> {
    config.validate()?;
    let mut nominal = Trajectory::rollout(problem, initial_controls)?;
    let mut mu = config.mu_min;
    let mut cost_log = vec![nominal.cost];
    let mut mu_trace = Vec::new();
    let mut trace = Vec::new();
    let mut status = SolverStatus::MaxIterations;
    let mut iterations = 0;

    while iterations < config.max_iterations {
        let mut attempts = 0;
        let mut backward = None;
        while mu < config.mu_max {
            attempts += 1;
            mu_trace.push(mu);
            match backward_pass(problem, &nominal, mu, config.max_active_set_changes) {
                Ok(bp) => {
                    backward = Some(bp);
                    break;
                }
                Err(_) => mu = (mu * config.gamma).min(config.mu_max),
            }
        }
        let Some(bp) = backward else {
            status = SolverStatus::IllConditioned;
            break;
        };

        let mut accepted = None;
        let mut full_step_change = None;
        for &alpha in &config.step_sizes {
            let Some(candidate) = forward_pass(problem, &nominal, &bp.laws, alpha) else {
                continue;
            };
            if full_step_change.is_none() {
                full_step_change = Some(control_change(&candidate.controls, &nominal.controls));
            }
            if candidate.cost < nominal.cost {
                accepted = Some((alpha, candidate));
                break;
            }
        }
        iterations += 1;

        match accepted {
            Some((alpha, candidate)) => {
                mu = (mu / config.gamma).max(config.mu_min);
                let change = control_change(&candidate.controls, &nominal.controls);
                nominal = candidate;
                cost_log.push(nominal.cost);
                trace.push(IterationRecord {
                    iteration: iterations,
                    cost: nominal.cost,
                    mu,
                    alpha: Some(alpha),
                    active_bounds: bp.active_count(),
                    backward_attempts: attempts,
                });
                if change < config.tolerance {
                    status = SolverStatus::Converged;
                    break;
                }
            }
            None => {
                trace.push(IterationRecord {
                    iteration: iterations,
                    cost: nominal.cost,
                    mu,
                    alpha: None,
                    active_bounds: bp.active_count(),
                    backward_attempts: attempts,
                });
                // No descent along the proposed update: if that update is already
                // below tolerance the nominal is stationary.
                if full_step_change.is_some_and(|c| c < config.tolerance) {
                    status = SolverStatus::Converged;
                    break;
                }
                mu = (mu * config.gamma).min(config.mu_max);
                if mu >= config.mu_max {
                    status = SolverStatus::IllConditioned;
                    break;
                }
            }
        }
    }

    Ok(SolverResult {
        controls: nominal.controls,
        states: nominal.states,
        cost: nominal.cost,
        iterations,
        status,
        final_mu: mu,
        cost_log,
        mu_trace,
        trace,
    })
}
