//! Elliptical repulsive potentials around surrounding vehicles.
//!
//! Each obstacle contributes `exp(-r)` where `r` is the normalized elliptical
//! distance from its center. The longitudinal semi-axis grows with speed
//! according to a time-gap policy.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleState;

/// Euclidean radius around the ellipse center inside which the square root is
/// treated as non-differentiable.
pub const CENTER_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleEllipse {
    pub center_x: f64,
    pub center_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub weight: f64,
}

impl ObstacleEllipse {
    /// Normalized elliptical distance of `(x, y)` from the center.
    pub fn radius(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.center_x) / self.sigma_x;
        let dy = (y - self.center_y) / self.sigma_y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Longitudinal semi-axis from the time-gap policy.
///
/// Uses the ego speed while the ego is behind (or level with) the obstacle and
/// the obstacle speed once the ego is ahead of it.
pub fn build_sigma_x(ego: &VehicleState, obstacle_x: f64, obstacle_vx: f64, tau: f64, obstacle_length: f64) -> f64 {
    if ego.x <= obstacle_x {
        ego.vx * tau + obstacle_length
    } else {
        obstacle_vx * tau + obstacle_length
    }
}

pub fn phi(ellipse: &ObstacleEllipse, x: f64, y: f64) -> f64 {
    (-ellipse.radius(x, y)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiDerivatives {
    pub value: f64,
    pub gradient: Vector2<f64>,
    pub hessian: Matrix2<f64>,
    /// Set when the point was within [`CENTER_EPSILON`] of the center and the
    /// surrogate was returned.
    pub singular: bool,
}

/// Gradient and Hessian of [`phi`] with respect to `(x, y)`.
///
/// Away from the center, with `d = (x - x_o, y - y_o)`, `D = diag(1/σx², 1/σy²)`
/// and `r = sqrt(dᵀ D d)`:
///
/// ```text
/// ∇r = D d / r
/// ∇Φ = -Φ ∇r
/// ∇²Φ = Φ [ (1 + 1/r) ∇r ∇rᵀ - D / r ]
/// ```
///
/// At the center the cone tip has no derivative; a zero gradient and the
/// negative-definite surrogate `-D` are returned instead.
pub fn phi_derivatives(ellipse: &ObstacleEllipse, x: f64, y: f64) -> PhiDerivatives {
    let dx = x - ellipse.center_x;
    let dy = y - ellipse.center_y;
    let ix = 1.0 / (ellipse.sigma_x * ellipse.sigma_x);
    let iy = 1.0 / (ellipse.sigma_y * ellipse.sigma_y);
    let d = Matrix2::new(ix, 0.0, 0.0, iy);

    if (dx * dx + dy * dy).sqrt() < CENTER_EPSILON {
        return PhiDerivatives {
            value: phi(ellipse, x, y),
            gradient: Vector2::zeros(),
            hessian: -d,
            singular: true,
        };
    }

    let r = (dx * dx * ix + dy * dy * iy).sqrt();
    let value = (-r).exp();
    let grad_r = Vector2::new(dx * ix / r, dy * iy / r);
    let gradient = -value * grad_r;
    let mut hessian = value * ((1.0 + 1.0 / r) * grad_r * grad_r.transpose() - d / r);
    // exact symmetry for downstream factorizations
    let off = 0.5 * (hessian[(0, 1)] + hessian[(1, 0)]);
    hessian[(0, 1)] = off;
    hessian[(1, 0)] = off;
    PhiDerivatives {
        value,
        gradient,
        hessian,
        singular: false,
    }
}

/// Sensitivity of [`phi`] to the longitudinal semi-axis `σx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisSensitivity {
    /// `∂Φ/∂σx`
    pub d_sigma: f64,
    /// `∂²Φ/∂σx²`
    pub d_sigma_sigma: f64,
    /// `∂²Φ/∂σx ∂(x, y)`
    pub d_sigma_position: Vector2<f64>,
}

/// Derivatives of [`phi`] involving `σx`, from `q = r²`:
///
/// ```text
/// q_σ = -2 dx² / σx³     q_σσ = 6 dx² / σx⁴     q_xσ = -4 dx / σx³
/// r_a = q_a / 2r         r_ab = q_ab / 2r - r_a r_b / r
/// Φ_a = -Φ r_a           Φ_ab = Φ (r_a r_b - r_ab)
/// ```
///
/// Zero at the center, matching the surrogate of [`phi_derivatives`].
pub fn phi_axis_sensitivity(ellipse: &ObstacleEllipse, x: f64, y: f64) -> AxisSensitivity {
    let dx = x - ellipse.center_x;
    let dy = y - ellipse.center_y;
    if (dx * dx + dy * dy).sqrt() < CENTER_EPSILON {
        return AxisSensitivity {
            d_sigma: 0.0,
            d_sigma_sigma: 0.0,
            d_sigma_position: Vector2::zeros(),
        };
    }
    let sx = ellipse.sigma_x;
    let sy = ellipse.sigma_y;
    let r = ellipse.radius(x, y);
    let value = (-r).exp();
    let r_x = dx / (sx * sx * r);
    let r_y = dy / (sy * sy * r);
    let r_s = -dx * dx / (sx * sx * sx * r);
    let r_ss = 3.0 * dx * dx / (sx.powi(4) * r) - r_s * r_s / r;
    let r_xs = -2.0 * dx / (sx.powi(3) * r) - r_x * r_s / r;
    let r_ys = -r_y * r_s / r;
    AxisSensitivity {
        d_sigma: -value * r_s,
        d_sigma_sigma: value * (r_s * r_s - r_ss),
        d_sigma_position: Vector2::new(value * (r_x * r_s - r_xs), value * (r_y * r_s - r_ys)),
    }
}
