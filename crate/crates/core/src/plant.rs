//! Rigid-body mover and the surrogate electromagnetic coupling.
//!
//! The mover is simulated in three translational degrees of freedom. The
//! commanded wrench passes through a coupling matrix `C(e)` whose argument is
//! the residual frame error `e = Δ(q) - η`: the difference between the true
//! (unknown) misalignment of the stator frame and the correction fed to the
//! commutation. `C(0) = I`, i.e. perfect commutation reproduces the commanded
//! wrench exactly.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while constructing plant parameters or mismatch fields.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("invalid plant parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },
    #[error(
        "mismatch field bound {bound:.3e} m is not below a quarter coil pitch ({limit:.3e} m)"
    )]
    FieldTooLarge { bound: f64, limit: f64 },
    #[error("mismatch field component `{0}` is not finite or not positive where required")]
    InvalidField(&'static str),
}

/// Physical parameters of the levitated mover.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    pub mass: f64,
    pub damping: [f64; 3],
    pub stiffness: [f64; 3],
    pub gravity: f64,
    pub coil_pitch: f64,
    pub cross_coupling: f64,
    pub dt: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            mass: 10.0,
            damping: [0.0; 3],
            stiffness: [0.0; 3],
            gravity: 9.81,
            coil_pitch: 0.04,
            cross_coupling: 1.0,
            dt: 1e-4,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        let positive = |name: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(PlantError::InvalidParam {
                    name,
                    reason: format!("must be finite and > 0, got {v}"),
                })
            }
        };
        positive("mass", self.mass)?;
        positive("coil_pitch", self.coil_pitch)?;
        positive("dt", self.dt)?;
        if !(self.cross_coupling.is_finite() && self.cross_coupling >= 0.0) {
            return Err(PlantError::InvalidParam {
                name: "cross_coupling",
                reason: format!("must be finite and >= 0, got {}", self.cross_coupling),
            });
        }
        if !self.gravity.is_finite() {
            return Err(PlantError::InvalidParam {
                name: "gravity",
                reason: "must be finite".into(),
            });
        }
        for (name, arr) in [("damping", &self.damping), ("stiffness", &self.stiffness)] {
            if arr.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(PlantError::InvalidParam {
                    name,
                    reason: format!("entries must be finite and >= 0, got {arr:?}"),
                });
            }
        }
        Ok(())
    }

    /// Spatial wavenumber `2π/τ` of the coil array.
    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.coil_pitch
    }

    /// Weight of the mover, `m·g`.
    pub fn weight(&self) -> f64 {
        self.mass * self.gravity
    }

    /// Small-signal slope of the in-plane feedback force with respect to the
    /// frame correction at hover: `κ·(2π/τ)·m·g`.
    pub fn nominal_eta_sensitivity(&self) -> f64 {
        self.cross_coupling * self.wavenumber() * self.weight()
    }

    /// Largest admissible frame error magnitude per axis.
    pub fn eta_limit(&self) -> f64 {
        self.coil_pitch / 4.0
    }
}

/// Position and velocity of the mover in the metrology frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlantState {
    pub q: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl PlantState {
    pub fn at_rest(q: Vector3<f64>) -> Self {
        Self { q, v: Vector3::zeros() }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

/// Axis-aligned rectangular workspace in the x/y plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Default for Workspace {
    fn default() -> Self {
        Self { min: [-0.1, -0.1], max: [0.1, 0.1] }
    }
}

impl Workspace {
    pub fn contains(&self, q: Vector2<f64>) -> bool {
        (0..2).all(|i| q[i] >= self.min[i] && q[i] <= self.max[i])
    }

    pub fn span(&self) -> [f64; 2] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1]]
    }

    /// Uniform `nx × ny` grid covering the workspace, row-major in y then x.
    pub fn grid(&self, nx: usize, ny: usize) -> Vec<Vector2<f64>> {
        let axis = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
            match n {
                0 => Vec::new(),
                1 => vec![0.5 * (lo + hi)],
                _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
            }
        };
        let xs = axis(nx, self.min[0], self.max[0]);
        let ys = axis(ny, self.min[1], self.max[1]);
        ys.iter()
            .flat_map(|&y| xs.iter().map(move |&x| Vector2::new(x, y)))
            .collect()
    }

    /// `n` seeded uniform random points inside the workspace.
    pub fn random_points(&self, n: usize, seed: u64) -> Vec<Vector2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector2::new(
                    rng.random_range(self.min[0]..=self.max[0]),
                    rng.random_range(self.min[1]..=self.max[1]),
                )
            })
            .collect()
    }
}

/// One sinusoidal component of the mismatch field. The x component of Δ
/// varies along x and the y component along y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Harmonic {
    pub amplitude_m: [f64; 2],
    pub pitch_m: f64,
    pub phase_rad: [f64; 2],
}

/// Localized Gaussian residual of the mismatch field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center_m: [f64; 2],
    pub width_m: f64,
    pub height_m: [f64; 2],
}

/// Spatial discrepancy Δ(q) between the ideal commutation model and the
/// simulated stator: a constant offset, periodic components and smooth
/// residual bumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MismatchField {
    #[serde(default)]
    pub offset_m: [f64; 2],
    #[serde(default)]
    pub harmonics: Vec<Harmonic>,
    #[serde(default)]
    pub bumps: Vec<Bump>,
    /// Seed the components were drawn from, when randomized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl MismatchField {
    /// Builds a field and checks that `sup ‖Δ‖∞ < τ/4` holds on the whole plane.
    pub fn new(
        offset_m: [f64; 2],
        harmonics: Vec<Harmonic>,
        bumps: Vec<Bump>,
        coil_pitch: f64,
    ) -> Result<Self, PlantError> {
        let field = Self { offset_m, harmonics, bumps, seed: None };
        field.validate(coil_pitch)?;
        Ok(field)
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Spatially constant field.
    pub fn constant(offset_m: [f64; 2]) -> Self {
        Self { offset_m, ..Self::default() }
    }

    /// Seeded random field with a static offset, coil-pitch harmonics and a
    /// few smooth residual bumps inside `workspace`.
    pub fn randomized(seed: u64, coil_pitch: f64, workspace: &Workspace) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offset_m = [rng.random_range(-4e-5..4e-5), rng.random_range(-4e-5..4e-5)];
        let signed = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        };
        let mut harmonics = Vec::new();
        for (pitch, lo, hi) in [(coil_pitch, 1.0e-5, 2.5e-5), (coil_pitch / 2.0, 3e-6, 8e-6)] {
            harmonics.push(Harmonic {
                amplitude_m: [signed(&mut rng, lo, hi), signed(&mut rng, lo, hi)],
                pitch_m: pitch,
                phase_rad: [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)],
            });
        }
        let bumps = (0..4)
            .map(|_| Bump {
                center_m: [
                    rng.random_range(workspace.min[0]..workspace.max[0]),
                    rng.random_range(workspace.min[1]..workspace.max[1]),
                ],
                width_m: rng.random_range(0.03..0.07),
                height_m: [rng.random_range(-2e-5..2e-5), rng.random_range(-2e-5..2e-5)],
            })
            .collect();
        Self { offset_m, harmonics, bumps, seed: Some(seed) }
    }

    /// Upper bound on `sup_q ‖Δ(q)‖∞`, valid everywhere in the plane.
    pub fn sup_bound(&self) -> f64 {
        (0..2)
            .map(|i| {
                self.offset_m[i].abs()
                    + self.harmonics.iter().map(|h| h.amplitude_m[i].abs()).sum::<f64>()
                    + self.bumps.iter().map(|b| b.height_m[i].abs()).sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    pub fn validate(&self, coil_pitch: f64) -> Result<(), PlantError> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.offset_m) {
            return Err(PlantError::InvalidField("offset_m"));
        }
        for h in &self.harmonics {
            if !finite(&h.amplitude_m) || !finite(&h.phase_rad) {
                return Err(PlantError::InvalidField("harmonics"));
            }
            if !(h.pitch_m.is_finite() && h.pitch_m > 0.0) {
                return Err(PlantError::InvalidField("harmonics.pitch_m"));
            }
        }
        for b in &self.bumps {
            if !finite(&b.center_m) || !finite(&b.height_m) {
                return Err(PlantError::InvalidField("bumps"));
            }
            if !(b.width_m.is_finite() && b.width_m > 0.0) {
                return Err(PlantError::InvalidField("bumps.width_m"));
            }
        }
        let bound = self.sup_bound();
        let limit = coil_pitch / 4.0;
        if bound >= limit {
            return Err(PlantError::FieldTooLarge { bound, limit });
        }
        Ok(())
    }
}

/// Evaluates Δ(q) at an in-plane position.
pub fn delta_field(field: &MismatchField, q: Vector2<f64>) -> Vector2<f64> {
    let mut d = Vector2::from(field.offset_m);
    for h in &field.harmonics {
        let k = 2.0 * PI / h.pitch_m;
        for i in 0..2 {
            d[i] += h.amplitude_m[i] * (k * q[i] + h.phase_rad[i]).sin();
        }
    }
    for b in &field.bumps {
        let c = Vector2::from(b.center_m);
        let g = (-(q - c).norm_squared() / (2.0 * b.width_m * b.width_m)).exp();
        d += Vector2::from(b.height_m) * g;
    }
    d
}

/// Coupling between commanded and applied wrench for a residual frame error
/// `e`: cosine gain loss on the in-plane axes and sine leakage between the
/// in-plane axes and z.
pub fn coupling_matrix(e: Vector2<f64>, coil_pitch: f64, kappa: f64) -> Matrix3<f64> {
    let k = 2.0 * PI / coil_pitch;
    let (sx, cx) = (k * e.x).sin_cos();
    let (sy, cy) = (k * e.y).sin_cos();
    Matrix3::new(
        cx,
        0.0,
        kappa * sx,
        0.0,
        cy,
        kappa * sy,
        -kappa * sx,
        -kappa * sy,
        cx * cy,
    )
}

/// Wrench physically applied to the mover when `f_ref` is commanded through
/// a commutation whose frame is corrected by `eta`.
pub fn apply_wrench(
    state: &PlantState,
    f_ref: Vector3<f64>,
    field: &MismatchField,
    eta: Vector2<f64>,
    params: &PlantParams,
) -> Vector3<f64> {
    let e = delta_field(field, state.q.xy()) - eta;
    coupling_matrix(e, params.coil_pitch, params.cross_coupling) * f_ref
}

/// Advances the mover by one sample with exact zero-order-hold integration
/// of `m·q̈ + d·q̇ + k·q = F_m - m·g·ẑ`.
pub fn step_dynamics(state: &PlantState, f_m: Vector3<f64>, params: &PlantParams) -> PlantState {
    let mut next = *state;
    let gravity = Vector3::new(0.0, 0.0, -params.weight());
    let force = f_m + gravity;
    for i in 0..3 {
        let (q, v) = zoh_axis(
            state.q[i],
            state.v[i],
            force[i],
            params.mass,
            params.damping[i],
            params.stiffness[i],
            params.dt,
        );
        next.q[i] = q;
        next.v[i] = v;
    }
    next
}

/// Exact discretization of a scalar mass-spring-damper under constant force.
fn zoh_axis(q: f64, v: f64, f: f64, m: f64, d: f64, k: f64, h: f64) -> (f64, f64) {
    let a = f / m;
    if d == 0.0 && k == 0.0 {
        return (q + v * h + 0.5 * a * h * h, v + a * h);
    }
    if k == 0.0 {
        // q̈ = a - c·q̇ with c = d/m.
        let c = d / m;
        let ech = (-c * h).exp();
        let em1 = -(-c * h).exp_m1(); // 1 - e^{-ch}
        let v_next = v * ech + a / c * em1;
        let q_next = q + v / c * em1 + a / c * (h - em1 / c);
        return (q_next, v_next);
    }
    // Shift to the static equilibrium and propagate the homogeneous response.
    let q_eq = f / k;
    let x0 = q - q_eq;
    let wn2 = k / m;
    let c = d / m;
    let disc = c * c / 4.0 - wn2;
    let sigma = -c / 2.0;
    let (x, xd) = if disc < -1e-14 * wn2 {
        let wd = (-disc).sqrt();
        let e = (sigma * h).exp();
        let (s, co) = (wd * h).sin_cos();
        let x = e * (x0 * co + (v - sigma * x0) / wd * s);
        let xd = e * (v * co + (sigma * v - wn2 * x0) / wd * s);
        (x, xd)
    } else if disc > 1e-14 * wn2 {
        let r = disc.sqrt();
        let (l1, l2) = (sigma + r, sigma - r);
        let c1 = (v - l2 * x0) / (l1 - l2);
        let c2 = (l1 * x0 - v) / (l1 - l2);
        let (e1, e2) = ((l1 * h).exp(), (l2 * h).exp());
        (c1 * e1 + c2 * e2, c1 * l1 * e1 + c2 * l2 * e2)
    } else {
        let e = (sigma * h).exp();
        let b = v - sigma * x0;
        (e * (x0 + b * h), e * (sigma * (x0 + b * h) + b))
    };
    (x + q_eq, xd)
}
