//! Vehicle models: kinematic and dynamic bicycle in the Frenet frame, the
//! Pacejka tire curve, and the regression-parameterized model the controller
//! propagates internally.
//!
//! All step functions are a single forward-Euler step with period `t`. The
//! curvature is evaluated at the pre-step arc length. Every operation is a
//! pure function of its arguments.

use crate::sysid::RegressionModel;
use crate::track::Track;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this longitudinal speed the 1/v_x features and slip angles are
/// undefined; callers switch to the kinematic model instead.
pub const V_EPS: f64 = 0.1;
/// Floor applied to v_x wherever the identified model divides by it.
pub const V_FLOOR: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("1 - e_y * kappa <= 0: state is at or past the arc center")]
    SingularGeometry,
    #[error("|v_x| <= {0} m/s: dynamic model not valid at low speed")]
    LowSpeedDomain(f64),
}

/// Physical vehicle parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Mass, kg.
    pub m: f64,
    /// Yaw inertia, kg m^2.
    pub i_z: f64,
    /// Distance from center of gravity to front axle, m.
    pub l_f: f64,
    /// Distance from center of gravity to rear axle, m.
    pub l_r: f64,
    /// Body width, m.
    pub width: f64,
    /// Gravitational acceleration, m/s^2.
    pub g: f64,
    /// Road-tire friction coefficient.
    pub mu: f64,
    /// Front cornering stiffness, N/rad.
    pub c_f: f64,
    /// Rear cornering stiffness, N/rad.
    pub c_r: f64,
}

impl VehicleParams {
    /// Parameter set of the first simulated agent.
    pub fn agent_one() -> Self {
        VehicleParams {
            m: 1.75,
            i_z: 0.03,
            l_f: 0.125,
            l_r: 0.125,
            width: 0.1,
            g: 9.81,
            mu: 0.85,
            c_f: 12.38,
            c_r: 9.60,
        }
    }

    /// Parameter set of the second, heavier agent.
    pub fn agent_two() -> Self {
        VehicleParams {
            m: 1.98,
            c_f: 13.03,
            c_r: 10.06,
            ..Self::agent_one()
        }
    }
}

/// Pacejka magic-formula coefficients.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PacejkaParams {
    /// Stiffness factor.
    pub b: f64,
    /// Shape factor.
    pub c: f64,
    /// Peak factor.
    pub d: f64,
}

impl PacejkaParams {
    /// Coefficients used by the simulated plant.
    pub fn simulation() -> Self {
        PacejkaParams {
            b: 6.0,
            c: 1.6,
            d: 1.0,
        }
    }

    /// Typical dry-road coefficients.
    pub fn dry() -> Self {
        PacejkaParams {
            b: 10.0,
            c: 1.9,
            d: 1.0,
        }
    }

    /// Typical snowy-road coefficients.
    pub fn snowy() -> Self {
        PacejkaParams {
            b: 12.0,
            c: 2.3,
            d: 0.82,
        }
    }
}

/// Six-component dynamic vehicle state in the Frenet frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Curvilinear abscissa, m.
    pub s: f64,
    /// Signed lateral offset from the centerline, m.
    pub e_y: f64,
    /// Heading error against the centerline tangent, rad.
    pub e_psi: f64,
    /// Yaw rate, rad/s.
    pub r: f64,
    /// Longitudinal velocity, m/s.
    pub v_x: f64,
    /// Lateral velocity, m/s.
    pub v_y: f64,
}

impl VehicleState {
    pub fn to_array(&self) -> [f64; 6] {
        [self.s, self.e_y, self.e_psi, self.r, self.v_x, self.v_y]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        VehicleState {
            s: a[0],
            e_y: a[1],
            e_psi: a[2],
            r: a[3],
            v_x: a[4],
            v_y: a[5],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Four-component kinematic state (no lateral velocity, scalar speed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicState {
    pub s: f64,
    pub e_y: f64,
    pub e_psi: f64,
    /// Speed along the velocity vector, m/s.
    pub v: f64,
}

impl KinematicState {
    pub fn to_array(&self) -> [f64; 4] {
        [self.s, self.e_y, self.e_psi, self.v]
    }
}

/// Actuation: longitudinal acceleration and front steering angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleInput {
    /// m/s^2
    pub a: f64,
    /// rad
    pub delta_f: f64,
}

impl VehicleInput {
    pub const ZERO: VehicleInput = VehicleInput { a: 0.0, delta_f: 0.0 };
}

/// Cartesian pose state for the kinematic bicycle: `[x, y, psi, v]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartesianState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
}

/// Lateral tire force curve `D sin(C arctan(B alpha))`.
pub fn pacejka(alpha: f64, p: &PacejkaParams) -> f64 {
    p.d * (p.c * (p.b * alpha).atan()).sin()
}

/// Kinematic slip angle from the front steering angle.
pub fn slip_angle_beta(delta_f: f64, vp: &VehicleParams) -> f64 {
    ((vp.l_r / (vp.l_f + vp.l_r)) * delta_f.tan()).atan()
}

/// One Euler step of the kinematic bicycle in Frenet coordinates.
pub fn kinematic_step(
    x: &KinematicState,
    u: &VehicleInput,
    track: &Track,
    t: f64,
    vp: &VehicleParams,
) -> Result<KinematicState, ModelError> {
    let kappa = track.curvature_at(x.s);
    kinematic_step_kappa(x, u, kappa, t, vp)
}

/// Kinematic step with the curvature frozen by the caller (the form the
/// controller uses once the curvature schedule is propagated).
pub fn kinematic_step_kappa(
    x: &KinematicState,
    u: &VehicleInput,
    kappa: f64,
    t: f64,
    vp: &VehicleParams,
) -> Result<KinematicState, ModelError> {
    let denom = 1.0 - x.e_y * kappa;
    if denom <= 0.0 {
        return Err(ModelError::SingularGeometry);
    }
    let beta = slip_angle_beta(u.delta_f, vp);
    let s_dot = x.v * (x.e_psi + beta).cos() / denom;
    Ok(KinematicState {
        s: x.s + t * s_dot,
        e_y: x.e_y + t * x.v * (x.e_psi + beta).sin(),
        e_psi: x.e_psi + t * (x.v / vp.l_r * beta.sin() - kappa * s_dot),
        v: x.v + t * u.a,
    })
}

/// Continuous-time derivative of the Frenet kinematic bicycle.
pub fn kinematic_frenet_derivative(
    x: &KinematicState,
    u: &VehicleInput,
    kappa: f64,
    vp: &VehicleParams,
) -> Result<[f64; 4], ModelError> {
    let denom = 1.0 - x.e_y * kappa;
    if denom <= 0.0 {
        return Err(ModelError::SingularGeometry);
    }
    let beta = slip_angle_beta(u.delta_f, vp);
    let s_dot = x.v * (x.e_psi + beta).cos() / denom;
    Ok([
        s_dot,
        x.v * (x.e_psi + beta).sin(),
        x.v / vp.l_r * beta.sin() - kappa * s_dot,
        u.a,
    ])
}

/// Continuous-time derivative of the Cartesian kinematic bicycle,
/// `[x_dot, y_dot, psi_dot, v_dot]`.
pub fn kinematic_cartesian_derivative(
    x: &CartesianState,
    u: &VehicleInput,
    vp: &VehicleParams,
) -> [f64; 4] {
    let beta = slip_angle_beta(u.delta_f, vp);
    [
        x.v * (x.psi + beta).cos(),
        x.v * (x.psi + beta).sin(),
        x.v / vp.l_r * beta.sin(),
        u.a,
    ]
}

/// Front and rear slip angles of the dynamic bicycle.
pub fn slip_angles(x: &VehicleState, delta_f: f64, vp: &VehicleParams) -> (f64, f64) {
    let denom = x.v_x.abs();
    let alpha_f = ((x.v_y + vp.l_f * x.r) / denom).atan() - delta_f;
    let alpha_r = ((x.v_y - vp.l_r * x.r) / denom).atan();
    (alpha_f, alpha_r)
}

/// Lateral tire forces from the Pacejka curve; each axle carries half the
/// weight.
pub fn tire_forces(
    x: &VehicleState,
    delta_f: f64,
    vp: &VehicleParams,
    pp: &PacejkaParams,
) -> (f64, f64) {
    let (alpha_f, alpha_r) = slip_angles(x, delta_f, vp);
    let f_f = -0.5 * vp.m * vp.g * vp.mu * pacejka(alpha_f, pp);
    let f_r = -0.5 * vp.m * vp.g * vp.mu * pacejka(alpha_r, pp);
    (f_f, f_r)
}

/// Continuous-time derivative of the dynamic bicycle in Frenet coordinates.
pub fn dynamic_derivative(
    x: &VehicleState,
    u: &VehicleInput,
    kappa: f64,
    vp: &VehicleParams,
    pp: &PacejkaParams,
) -> Result<[f64; 6], ModelError> {
    if x.v_x.abs() <= V_EPS {
        return Err(ModelError::LowSpeedDomain(V_EPS));
    }
    let denom = 1.0 - x.e_y * kappa;
    if denom <= 0.0 {
        return Err(ModelError::SingularGeometry);
    }
    let (f_f, f_r) = tire_forces(x, u.delta_f, vp, pp);
    let s_dot = (x.v_x * x.e_psi.cos() - x.v_y * x.e_psi.sin()) / denom;
    Ok([
        s_dot,
        x.v_x * x.e_psi.sin() + x.v_y * x.e_psi.cos(),
        x.r - kappa * s_dot,
        (vp.l_f * f_f - vp.l_r * f_r) / vp.i_z,
        u.a + x.r * x.v_y,
        (f_f * u.delta_f.cos() + f_r) / vp.m - x.r * x.v_x,
    ])
}

/// One Euler step of the Pacejka dynamic bicycle.
pub fn dynamic_step_pacejka(
    x: &VehicleState,
    u: &VehicleInput,
    track: &Track,
    t: f64,
    vp: &VehicleParams,
    pp: &PacejkaParams,
) -> Result<VehicleState, ModelError> {
    let kappa = track.curvature_at(x.s);
    dynamic_step_pacejka_kappa(x, u, kappa, t, vp, pp)
}

/// Dynamic step with explicit curvature.
pub fn dynamic_step_pacejka_kappa(
    x: &VehicleState,
    u: &VehicleInput,
    kappa: f64,
    t: f64,
    vp: &VehicleParams,
    pp: &PacejkaParams,
) -> Result<VehicleState, ModelError> {
    let dx = dynamic_derivative(x, u, kappa, vp, pp)?;
    let a = x.to_array();
    let mut out = [0.0; 6];
    for i in 0..6 {
        out[i] = a[i] + t * dx[i];
    }
    Ok(VehicleState::from_array(out))
}

/// Continuous-time derivative of the regression-parameterized model.
pub fn identified_derivative(
    x: &VehicleState,
    u: &VehicleInput,
    kappa: f64,
    model: &RegressionModel,
) -> Result<[f64; 6], ModelError> {
    if x.v_x.abs() < V_FLOOR {
        return Err(ModelError::LowSpeedDomain(V_FLOOR));
    }
    let denom = 1.0 - x.e_y * kappa;
    if denom <= 0.0 {
        return Err(ModelError::SingularGeometry);
    }
    let s_dot = (x.v_x * x.e_psi.cos() - x.v_y * x.e_psi.sin()) / denom;
    let tv = &model.theta_vx;
    let ty = &model.theta_vy;
    let tp = &model.theta_psidot;
    Ok([
        s_dot,
        x.v_x * x.e_psi.sin() + x.v_y * x.e_psi.cos(),
        x.r - kappa * s_dot,
        tp[0] * x.v_y / x.v_x + tp[1] * x.r / x.v_x + tp[2] * u.delta_f,
        tv[0] * u.a + tv[1] * x.r * x.v_y + tv[2] * x.v_x,
        ty[0] * x.v_y / x.v_x + ty[1] * x.r / x.v_x + ty[2] * u.delta_f + ty[3] * x.r * x.v_x,
    ])
}

/// One Euler step of the identified dynamics.
pub fn identified_step(
    x: &VehicleState,
    u: &VehicleInput,
    track: &Track,
    t: f64,
    model: &RegressionModel,
) -> Result<VehicleState, ModelError> {
    identified_step_kappa(x, u, track.curvature_at(x.s), t, model)
}

/// Identified-model step with explicit curvature.
pub fn identified_step_kappa(
    x: &VehicleState,
    u: &VehicleInput,
    kappa: f64,
    t: f64,
    model: &RegressionModel,
) -> Result<VehicleState, ModelError> {
    let dx = identified_derivative(x, u, kappa, model)?;
    let a = x.to_array();
    let mut out = [0.0; 6];
    for i in 0..6 {
        out[i] = a[i] + t * dx[i];
    }
    Ok(VehicleState::from_array(out))
}

/// Jacobians of one identified-model Euler step with frozen curvature,
/// returned as `(d x_next / d x, d x_next / d u)`.
///
/// v_x is floored at [`V_FLOOR`] inside every 1/v_x feature so the
/// linearization stays bounded.
pub fn identified_step_jacobian(
    x: &VehicleState,
    _u: &VehicleInput,
    kappa: f64,
    t: f64,
    model: &RegressionModel,
) -> ([[f64; 6]; 6], [[f64; 2]; 6]) {
    let vx = if x.v_x.abs() < V_FLOOR {
        V_FLOOR.copysign(if x.v_x == 0.0 { 1.0 } else { x.v_x })
    } else {
        x.v_x
    };
    let denom = (1.0 - x.e_y * kappa).max(1e-6);
    let cos_ep = x.e_psi.cos();
    let sin_ep = x.e_psi.sin();
    let num = x.v_x * cos_ep - x.v_y * sin_ep;

    // Partial derivatives of s_dot.
    let ds_dey = num * kappa / (denom * denom);
    let ds_depsi = (-x.v_x * sin_ep - x.v_y * cos_ep) / denom;
    let ds_dvx = cos_ep / denom;
    let ds_dvy = -sin_ep / denom;

    let tv = &model.theta_vx;
    let ty = &model.theta_vy;
    let tp = &model.theta_psidot;
    let inv_vx = 1.0 / vx;
    let inv_vx2 = inv_vx * inv_vx;

    let mut a = [[0.0; 6]; 6];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    // s
    a[0][1] += t * ds_dey;
    a[0][2] += t * ds_depsi;
    a[0][4] += t * ds_dvx;
    a[0][5] += t * ds_dvy;
    // e_y
    a[1][2] += t * (x.v_x * cos_ep - x.v_y * sin_ep);
    a[1][4] += t * sin_ep;
    a[1][5] += t * cos_ep;
    // e_psi
    a[2][1] += -t * kappa * ds_dey;
    a[2][2] += -t * kappa * ds_depsi;
    a[2][3] += t;
    a[2][4] += -t * kappa * ds_dvx;
    a[2][5] += -t * kappa * ds_dvy;
    // r
    a[3][3] += t * tp[1] * inv_vx;
    a[3][4] += t * (-(tp[0] * x.v_y + tp[1] * x.r) * inv_vx2);
    a[3][5] += t * tp[0] * inv_vx;
    // v_x
    a[4][3] += t * tv[1] * x.v_y;
    a[4][4] += t * tv[2];
    a[4][5] += t * tv[1] * x.r;
    // v_y
    a[5][3] += t * (ty[1] * inv_vx + ty[3] * x.v_x);
    a[5][4] += t * (-(ty[0] * x.v_y + ty[1] * x.r) * inv_vx2 + ty[3] * x.r);
    a[5][5] += t * ty[0] * inv_vx;

    let mut b = [[0.0; 2]; 6];
    b[3][1] = t * tp[2];
    b[4][0] = t * tv[0];
    b[5][1] = t * ty[2];
    (a, b)
}

/// Jacobians of one kinematic Euler step with frozen curvature.
pub fn kinematic_step_jacobian(
    x: &KinematicState,
    u: &VehicleInput,
    kappa: f64,
    t: f64,
    vp: &VehicleParams,
) -> ([[f64; 4]; 4], [[f64; 2]; 4]) {
    let denom = (1.0 - x.e_y * kappa).max(1e-6);
    let ratio = vp.l_r / (vp.l_f + vp.l_r);
    let tan_d = u.delta_f.tan();
    let beta = (ratio * tan_d).atan();
    let cos_b = beta.cos();
    // d beta / d delta_f
    let dbeta = ratio * (1.0 + tan_d * tan_d) / (1.0 + (ratio * tan_d).powi(2));
    let ang = x.e_psi + beta;
    let cos_a = ang.cos();
    let sin_a = ang.sin();

    let mut a = [[0.0; 4]; 4];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    // s
    a[0][1] += t * (x.v * cos_a * kappa / (denom * denom));
    a[0][2] += t * (-x.v * sin_a / denom);
    a[0][3] += t * (cos_a / denom);
    // e_y
    a[1][2] += t * x.v * cos_a;
    a[1][3] += t * sin_a;
    // e_psi
    a[2][1] += -t * kappa * (x.v * cos_a * kappa / (denom * denom));
    a[2][2] += -t * kappa * (-x.v * sin_a / denom);
    a[2][3] += t * (beta.sin() / vp.l_r - kappa * cos_a / denom);

    let mut b = [[0.0; 2]; 4];
    b[3][0] = t;
    // steering acts through beta
    b[0][1] = t * (-x.v * sin_a / denom) * dbeta;
    b[1][1] = t * (x.v * cos_a) * dbeta;
    b[2][1] = t * (x.v / vp.l_r * cos_b + kappa * x.v * sin_a / denom) * dbeta;
    (a, b)
}
