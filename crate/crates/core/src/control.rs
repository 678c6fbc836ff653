//! Rigid-body position loop and the commutation-frame regulator.
//!
//! The position loop is a per-axis PID: forward-Euler integral action and a
//! Tustin-discretized lead filter, scaled so that the discrete open loop
//! `C(z)·P(z)` has unit gain at the requested bandwidth, with `P(z)` the
//! zero-order-hold equivalent of `1/(m s²)`.
//!
//! The commutation regulator is a pure integrator acting on the in-plane
//! feedback forces. Its gain is normalized by the static force-per-frame-error
//! sensitivity so that the commutation loop crosses over at `f_bw`.

use std::f64::consts::PI;

use nalgebra::{Complex, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::plant::PlantParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionLoopParams {
    pub bandwidth_hz: [f64; 3],
    /// Integrator corner sits at `bandwidth / integrator_ratio`.
    pub integrator_ratio: f64,
    /// Lead zero at `bandwidth / lead_span`, lead pole at `bandwidth · lead_span`.
    pub lead_span: f64,
    pub mass: f64,
    pub dt: f64,
}

impl Default for PositionLoopParams {
    fn default() -> Self {
        Self {
            bandwidth_hz: [150.0; 3],
            integrator_ratio: 10.0,
            lead_span: 7.0,
            mass: 10.0,
            dt: 1e-4,
        }
    }
}

impl PositionLoopParams {
    pub fn for_plant(plant: &PlantParams) -> Self {
        Self { mass: plant.mass, dt: plant.dt, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.bandwidth_hz.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(format!("bandwidth must be > 0, got {:?}", self.bandwidth_hz));
        }
        if !(self.integrator_ratio > 0.0 && self.lead_span > 1.0) {
            return Err("integrator ratio must be > 0 and lead span > 1".into());
        }
        if !(self.mass > 0.0 && self.dt > 0.0) {
            return Err("mass and sample period must be > 0".into());
        }
        let nyquist = 0.5 / self.dt;
        if self.bandwidth_hz.iter().any(|f| f * self.lead_span >= nyquist) {
            return Err(format!("lead pole exceeds the Nyquist frequency {nyquist} Hz"));
        }
        Ok(())
    }
}

/// Discrete PID for one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisController {
    gain: f64,
    omega_i: f64,
    dt: f64,
    // lead filter: y_k = b0 u_k + b1 u_{k-1} - a1 y_{k-1}
    b0: f64,
    b1: f64,
    a1: f64,
    integral: f64,
    u_prev: f64,
    y_prev: f64,
}

impl AxisController {
    pub fn new(bandwidth_hz: f64, integrator_ratio: f64, lead_span: f64, mass: f64, dt: f64) -> Self {
        let wc = 2.0 * PI * bandwidth_hz;
        let wz = wc / lead_span;
        let wp = wc * lead_span;
        let c = 2.0 / dt;
        let den0 = 1.0 + c / wp;
        let mut ctrl = Self {
            gain: 1.0,
            omega_i: wc / integrator_ratio,
            dt,
            b0: (1.0 + c / wz) / den0,
            b1: (1.0 - c / wz) / den0,
            a1: (1.0 - c / wp) / den0,
            integral: 0.0,
            u_prev: 0.0,
            y_prev: 0.0,
        };
        let loop_mag = (ctrl.frequency_response(wc) * zoh_double_integrator(wc, mass, dt)).norm();
        ctrl.gain = 1.0 / loop_mag;
        ctrl
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn update(&mut self, error: f64) -> f64 {
        let u = error + self.omega_i * self.integral;
        self.integral += self.dt * error;
        let y = self.b0 * u + self.b1 * self.u_prev - self.a1 * self.y_prev;
        self.u_prev = u;
        self.y_prev = y;
        self.gain * y
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
        self.u_prev = 0.0;
        self.y_prev = 0.0;
    }

    /// Frequency response of the discrete controller at `omega` rad/s.
    pub fn frequency_response(&self, omega: f64) -> Complex<f64> {
        let z = Complex::from_polar(1.0, omega * self.dt);
        let zi = z.inv();
        let pi = Complex::new(1.0, 0.0) + self.omega_i * self.dt / (z - 1.0);
        let lead = (self.b0 + self.b1 * zi) / (1.0 + self.a1 * zi);
        pi * lead * self.gain
    }
}

/// ZOH-equivalent of `1/(m s²)` evaluated on the unit circle.
pub fn zoh_double_integrator(omega: f64, mass: f64, dt: f64) -> Complex<f64> {
    let z = Complex::from_polar(1.0, omega * dt);
    (z + 1.0) * (dt * dt / (2.0 * mass)) / ((z - 1.0) * (z - 1.0))
}

/// Three-axis rigid-body feedback controller.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionController {
    axes: [AxisController; 3],
}

impl PositionController {
    pub fn new(params: &PositionLoopParams) -> Self {
        let axis = |i: usize| {
            AxisController::new(
                params.bandwidth_hz[i],
                params.integrator_ratio,
                params.lead_span,
                params.mass,
                params.dt,
            )
        };
        Self { axes: [axis(0), axis(1), axis(2)] }
    }

    /// Feedback force `F_c` for the current position error.
    pub fn position_feedback(&mut self, e_pos: Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            self.axes[0].update(e_pos.x),
            self.axes[1].update(e_pos.y),
            self.axes[2].update(e_pos.z),
        )
    }

    pub fn axis(&self, i: usize) -> &AxisController {
        &self.axes[i]
    }

    pub fn gains(&self) -> [f64; 3] {
        [self.axes[0].gain, self.axes[1].gain, self.axes[2].gain]
    }
}

/// Acceleration feedforward plus gravity compensation.
pub fn rigid_body_feedforward(a_ref: Vector3<f64>, mass: f64, gravity: f64) -> Vector3<f64> {
    mass * a_ref + Vector3::new(0.0, 0.0, mass * gravity)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommutationLoopParams {
    pub bandwidth_hz: [f64; 2],
    /// Static slope of the in-plane feedback force per metre of frame error.
    pub sensitivity: f64,
    /// Loop sign per axis; negative feedback for the default coupling is `-1`.
    pub sign: [f64; 2],
    /// Saturation of the frame correction per axis.
    pub limit: f64,
    pub dt: f64,
}

impl CommutationLoopParams {
    /// Defaults tied to the plant and position loop: a bandwidth one
    /// hundredth of the position loop and the nominal static sensitivity.
    pub fn for_plant(plant: &PlantParams, position: &PositionLoopParams) -> Self {
        Self {
            bandwidth_hz: [position.bandwidth_hz[0] / 100.0, position.bandwidth_hz[1] / 100.0],
            sensitivity: plant.nominal_eta_sensitivity(),
            sign: [-1.0, -1.0],
            limit: plant.eta_limit(),
            dt: plant.dt,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.bandwidth_hz.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(format!("bandwidth must be > 0, got {:?}", self.bandwidth_hz));
        }
        if !(self.sensitivity.is_finite() && self.sensitivity > 0.0) {
            return Err(format!("sensitivity must be > 0, got {}", self.sensitivity));
        }
        if self.sign.iter().any(|s| s.abs() != 1.0) {
            return Err(format!("sign entries must be +1 or -1, got {:?}", self.sign));
        }
        if !(self.limit > 0.0 && self.dt > 0.0) {
            return Err("limit and sample period must be > 0".into());
        }
        Ok(())
    }

    /// Integrator gain per axis in m/(N·s).
    pub fn integral_gain(&self) -> [f64; 2] {
        [0, 1].map(|j| self.sign[j] * 2.0 * PI * self.bandwidth_hz[j] / self.sensitivity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CommutationState {
    /// Regulator output η_fb (clamped).
    pub eta: Vector2<f64>,
    /// Integrator accumulator; frozen while the output is clamped.
    pub accumulator: Vector2<f64>,
    pub enabled: bool,
    /// Clamp activity of the last regulator step, per axis.
    pub saturated: [bool; 2],
}

impl CommutationState {
    pub fn new(initial_eta: Vector2<f64>, enabled: bool) -> Self {
        Self { eta: initial_eta, accumulator: initial_eta, enabled, saturated: [false; 2] }
    }
}

/// One forward-Euler step of the commutation integrator.
pub fn commutation_regulator_step(
    f_c: Vector3<f64>,
    state: &CommutationState,
    params: &CommutationLoopParams,
) -> CommutationState {
    let mut next = *state;
    if !state.enabled {
        next.saturated = [false; 2];
        return next;
    }
    let ki = params.integral_gain();
    for j in 0..2 {
        let increment = ki[j] * f_c[j] * params.dt;
        let candidate = state.accumulator[j] + increment;
        if candidate.abs() > params.limit {
            // clamp without winding up past the limit
            next.saturated[j] = true;
            next.accumulator[j] = candidate.clamp(-params.limit, params.limit);
        } else {
            next.saturated[j] = false;
            next.accumulator[j] = candidate;
        }
        next.eta[j] = next.accumulator[j];
    }
    next
}

/// Frame correction fed to the commutation: regulator output plus
/// feedforward, clamped to `±limit`. Returns the per-axis clamp flags too.
pub fn total_frame_correction(
    state: &CommutationState,
    eta_ff: Vector2<f64>,
    limit: f64,
) -> (Vector2<f64>, [bool; 2]) {
    let raw = state.eta + eta_ff;
    let clamped = raw.map(|v| v.clamp(-limit, limit));
    (clamped, [raw.x.abs() > limit, raw.y.abs() > limit])
}
