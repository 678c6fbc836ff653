//! TOML experiment configuration. Keys carry their unit as a suffix; every
//! table rejects unknown keys.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::{default_positions, GdConfig};
use crate::control::{CommutationLoopParams, PositionLoopParams};
use crate::gpff::TuneBudget;
use crate::plant::{Bump, Harmonic, MismatchField, PlantParams, Workspace};
use crate::sim::{Mode, ScenarioConfig, SystemConfig};
use crate::trajectory::{ProfileParams, ScanAxis};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSection {
    pub mass_kg: f64,
    pub gravity_m_per_s2: f64,
    pub coil_pitch_m: f64,
    pub cross_coupling: f64,
    pub dt_s: f64,
    pub damping_n_s_per_m: [f64; 3],
    pub stiffness_n_per_m: [f64; 3],
}

impl Default for PlantSection {
    fn default() -> Self {
        let p = PlantParams::default();
        Self {
            mass_kg: p.mass,
            gravity_m_per_s2: p.gravity,
            coil_pitch_m: p.coil_pitch,
            cross_coupling: p.cross_coupling,
            dt_s: p.dt,
            damping_n_s_per_m: p.damping,
            stiffness_n_per_m: p.stiffness,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Zero,
    Constant,
    #[default]
    Randomized,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSection {
    pub kind: FieldKind,
    /// Seed of a randomized field.
    pub seed: u64,
    pub offset_m: [f64; 2],
    pub harmonics: Vec<Harmonic>,
    pub bumps: Vec<Bump>,
}

impl Default for FieldSection {
    fn default() -> Self {
        Self { kind: FieldKind::Randomized, seed: 2024, offset_m: [0.0; 2], harmonics: Vec::new(), bumps: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PositionLoopSection {
    pub bandwidth_hz: [f64; 3],
    pub integrator_ratio: f64,
    pub lead_span: f64,
}

impl Default for PositionLoopSection {
    fn default() -> Self {
        let p = PositionLoopParams::default();
        Self { bandwidth_hz: p.bandwidth_hz, integrator_ratio: p.integrator_ratio, lead_span: p.lead_span }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CommutationLoopSection {
    /// Defaults to one hundredth of the position-loop bandwidth.
    pub bandwidth_hz: Option<[f64; 2]>,
    /// Defaults to the nominal static sensitivity of the plant.
    pub sensitivity_n_per_m: Option<f64>,
    pub sign: Option<[f64; 2]>,
    /// Defaults to a quarter coil pitch.
    pub limit_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkspaceSection {
    pub min_m: [f64; 2],
    pub max_m: [f64; 2],
}

impl Default for WorkspaceSection {
    fn default() -> Self {
        let w = Workspace::default();
        Self { min_m: w.min, max_m: w.max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub stroke_m: f64,
    pub v_max_m_per_s: f64,
    pub a_max_m_per_s2: f64,
    pub j_max_m_per_s3: f64,
    pub s_max_m_per_s4: f64,
    pub axis: ScanAxis,
    pub start_m: [f64; 2],
}

impl Default for ProfileSection {
    fn default() -> Self {
        let p = ProfileParams::default();
        Self {
            stroke_m: p.stroke,
            v_max_m_per_s: p.v_max,
            a_max_m_per_s2: p.a_max,
            j_max_m_per_s3: p.j_max,
            s_max_m_per_s4: p.s_max,
            axis: p.axis,
            start_m: [0.0, -0.025],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    /// Defaults to five commutation-loop time constants.
    pub pre_hold_s: Option<f64>,
    /// Defaults to pre-hold + move + 0.1 s.
    pub duration_s: Option<f64>,
    pub initial_eta_m: [f64; 2],
    /// Calibrated static correction used by the static-calibrated mode.
    pub static_eta_m: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementSection {
    pub noise_std_m: f64,
    /// Defaults to 20 position-loop periods.
    pub settle_s: Option<f64>,
    /// Defaults to 10 position-loop periods.
    pub average_s: Option<f64>,
    /// Defaults to 5 commutation-loop periods.
    pub hold_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    /// Points per side of the calibration grid.
    pub grid: usize,
    pub eta0_m: [f64; 2],
    pub xi_m: Option<[f64; 2]>,
    pub lambda0_m_per_n: Option<f64>,
    pub max_iterations: usize,
    pub step_tol_m: Option<f64>,
    pub stagnation_tol: f64,
    pub objective_tol_n: f64,
    pub beta: f64,
    pub max_backtracks: usize,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            grid: 6,
            eta0_m: [0.0; 2],
            xi_m: None,
            lambda0_m_per_n: None,
            max_iterations: 50,
            step_tol_m: None,
            stagnation_tol: 1e-3,
            objective_tol_n: 1e-6,
            beta: 0.5,
            max_backtracks: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectSection {
    /// Points per side of the training grid.
    pub grid: usize,
}

impl Default for CollectSection {
    fn default() -> Self {
        Self { grid: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpSection {
    /// Spatial period of the periodic kernel term; defaults to the coil pitch.
    pub period_m: Option<f64>,
    pub restarts: usize,
    pub evals_per_restart: usize,
    pub max_points: usize,
    pub seed: u64,
    /// Fraction of the dataset used for training.
    pub split: f64,
    pub bfr_floor_pct: f64,
}

impl Default for GpSection {
    fn default() -> Self {
        let b = TuneBudget::default();
        Self {
            period_m: None,
            restarts: b.restarts,
            evals_per_restart: b.evals_per_restart,
            max_points: b.max_points,
            seed: b.seed,
            split: 0.8,
            bfr_floor_pct: 80.0,
        }
    }
}

/// Complete experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub plant: PlantSection,
    pub field: FieldSection,
    pub position_loop: PositionLoopSection,
    pub commutation_loop: CommutationLoopSection,
    pub workspace: WorkspaceSection,
    pub profile: ProfileSection,
    pub scenario: ScenarioSection,
    pub measurement: MeasurementSection,
    pub calibration: CalibrationSection,
    pub collect: CollectSection,
    pub gp: GpSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("serializable")
    }

    pub fn plant(&self) -> PlantParams {
        let p = &self.plant;
        PlantParams {
            mass: p.mass_kg,
            damping: p.damping_n_s_per_m,
            stiffness: p.stiffness_n_per_m,
            gravity: p.gravity_m_per_s2,
            coil_pitch: p.coil_pitch_m,
            cross_coupling: p.cross_coupling,
            dt: p.dt_s,
        }
    }

    pub fn workspace(&self) -> Workspace {
        Workspace { min: self.workspace.min_m, max: self.workspace.max_m }
    }

    pub fn field(&self) -> MismatchField {
        let f = &self.field;
        match f.kind {
            FieldKind::Zero => MismatchField::zero(),
            FieldKind::Constant => MismatchField::constant(f.offset_m),
            FieldKind::Randomized => MismatchField::randomized(f.seed, self.plant.coil_pitch_m, &self.workspace()),
            FieldKind::Explicit => MismatchField {
                offset_m: f.offset_m,
                harmonics: f.harmonics.clone(),
                bumps: f.bumps.clone(),
                seed: None,
            },
        }
    }

    pub fn system(&self) -> SystemConfig {
        let plant = self.plant();
        let position = PositionLoopParams {
            bandwidth_hz: self.position_loop.bandwidth_hz,
            integrator_ratio: self.position_loop.integrator_ratio,
            lead_span: self.position_loop.lead_span,
            mass: plant.mass,
            dt: plant.dt,
        };
        let mut commutation = CommutationLoopParams::for_plant(&plant, &position);
        let c = &self.commutation_loop;
        if let Some(bw) = c.bandwidth_hz {
            commutation.bandwidth_hz = bw;
        }
        if let Some(s) = c.sensitivity_n_per_m {
            commutation.sensitivity = s;
        }
        if let Some(s) = c.sign {
            commutation.sign = s;
        }
        if let Some(l) = c.limit_m {
            commutation.limit = l;
        }
        SystemConfig {
            plant,
            field: self.field(),
            position,
            commutation,
            workspace: self.workspace(),
            noise_std_m: self.measurement.noise_std_m,
            seed: self.seed,
        }
    }

    pub fn profile(&self) -> ProfileParams {
        let p = &self.profile;
        ProfileParams {
            stroke: p.stroke_m,
            v_max: p.v_max_m_per_s,
            a_max: p.a_max_m_per_s2,
            j_max: p.j_max_m_per_s3,
            s_max: p.s_max_m_per_s4,
            dt: self.plant.dt_s,
            axis: p.axis,
        }
    }

    pub fn scenario(&self, mode: Mode) -> ScenarioConfig {
        let mut sc = ScenarioConfig::new(self.system(), mode);
        sc.profile = self.profile();
        sc.start_m = self.profile.start_m;
        sc.initial_eta_m = self.scenario.initial_eta_m;
        sc.static_eta_m = self.scenario.static_eta_m;
        if let Some(t) = self.scenario.pre_hold_s {
            sc.pre_hold_s = t;
        }
        sc.duration_s = self.scenario.duration_s.unwrap_or_else(|| sc.default_duration());
        sc
    }

    pub fn gd_config(&self, sys: &SystemConfig) -> GdConfig {
        let c = &self.calibration;
        let mut g = GdConfig::for_system(sys);
        g.positions = if c.grid == 6 {
            default_positions(&sys.workspace)
        } else {
            sys.workspace.grid(c.grid, c.grid).into_iter().map(|p| [p.x, p.y]).collect()
        };
        g.eta0 = c.eta0_m;
        if let Some(x) = c.xi_m {
            g.xi = x;
        }
        if let Some(l) = c.lambda0_m_per_n {
            g.lambda0 = l;
        }
        if let Some(s) = c.step_tol_m {
            g.step_tol = s;
        }
        g.max_iterations = c.max_iterations;
        g.stagnation_tol = c.stagnation_tol;
        g.objective_tol = c.objective_tol_n;
        g.beta = c.beta;
        g.max_backtracks = c.max_backtracks;
        g
    }

    pub fn collect_grid(&self) -> Vec<Vector2<f64>> {
        self.workspace().grid(self.collect.grid, self.collect.grid)
    }

    pub fn gp_period(&self) -> f64 {
        self.gp.period_m.unwrap_or(self.plant.coil_pitch_m)
    }

    pub fn tune_budget(&self) -> TuneBudget {
        TuneBudget {
            restarts: self.gp.restarts,
            evals_per_restart: self.gp.evals_per_restart,
            max_points: self.gp.max_points,
            seed: self.gp.seed,
        }
    }

    pub fn hold_time(&self, sys: &SystemConfig) -> f64 {
        self.measurement.hold_s.unwrap_or_else(|| sys.default_hold_time())
    }

    /// Checks every value and names the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let pos = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(key, format!("must be finite and > 0, got {v}")))
            }
        };
        let p = &self.plant;
        pos("plant.mass_kg", p.mass_kg)?;
        pos("plant.gravity_m_per_s2", p.gravity_m_per_s2)?;
        pos("plant.coil_pitch_m", p.coil_pitch_m)?;
        pos("plant.dt_s", p.dt_s)?;
        if !(p.cross_coupling.is_finite() && p.cross_coupling >= 0.0) {
            return Err(invalid("plant.cross_coupling", "must be finite and >= 0"));
        }
        for (key, arr) in [("plant.damping_n_s_per_m", p.damping_n_s_per_m), ("plant.stiffness_n_per_m", p.stiffness_n_per_m)] {
            if arr.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(invalid(key, "entries must be finite and >= 0"));
            }
        }
        let w = &self.workspace;
        if (0..2).any(|i| !(w.min_m[i] < w.max_m[i])) {
            return Err(invalid("workspace.min_m", "must be below workspace.max_m on both axes"));
        }
        if let Err(e) = self.field().validate(p.coil_pitch_m) {
            return Err(invalid("field", e.to_string()));
        }
        for (i, f) in self.position_loop.bandwidth_hz.iter().enumerate() {
            pos(&format!("position_loop.bandwidth_hz[{i}]"), *f)?;
        }
        pos("position_loop.integrator_ratio", self.position_loop.integrator_ratio)?;
        if !(self.position_loop.lead_span > 1.0) {
            return Err(invalid("position_loop.lead_span", "must be > 1"));
        }
        let sys = self.system();
        if let Err(e) = sys.position.validate() {
            return Err(invalid("position_loop", e));
        }
        if let Err(e) = sys.commutation.validate() {
            return Err(invalid("commutation_loop", e));
        }
        let pr = &self.profile;
        pos("profile.stroke_m", pr.stroke_m)?;
        pos("profile.v_max_m_per_s", pr.v_max_m_per_s)?;
        pos("profile.a_max_m_per_s2", pr.a_max_m_per_s2)?;
        pos("profile.j_max_m_per_s3", pr.j_max_m_per_s3)?;
        pos("profile.s_max_m_per_s4", pr.s_max_m_per_s4)?;
        if let Some(t) = self.scenario.pre_hold_s {
            if !(t >= 0.0) {
                return Err(invalid("scenario.pre_hold_s", "must be >= 0"));
            }
        }
        if let Some(t) = self.scenario.duration_s {
            pos("scenario.duration_s", t)?;
        }
        if !(self.measurement.noise_std_m >= 0.0) {
            return Err(invalid("measurement.noise_std_m", "must be >= 0"));
        }
        let (ts, ta, th) = (sys.default_settle_time(), sys.default_average_time(), sys.default_hold_time());
        for (key, v, min) in [
            ("measurement.settle_s", self.measurement.settle_s, ts),
            ("measurement.average_s", self.measurement.average_s, ta),
            ("measurement.hold_s", self.measurement.hold_s, th),
        ] {
            if let Some(v) = v {
                if !(v + 1e-12 >= min) {
                    return Err(invalid(key, format!("must be >= {min} s, got {v}")));
                }
            }
        }
        let c = &self.calibration;
        if c.grid == 0 {
            return Err(invalid("calibration.grid", "must be >= 1"));
        }
        if let Some(x) = c.xi_m {
            if x.iter().any(|v| *v == 0.0 || !v.is_finite()) {
                return Err(invalid("calibration.xi_m", "entries must be finite and nonzero"));
            }
        }
        if !(c.beta > 0.0 && c.beta < 1.0) {
            return Err(invalid("calibration.beta", "must lie in (0, 1)"));
        }
        if c.max_iterations == 0 {
            return Err(invalid("calibration.max_iterations", "must be >= 1"));
        }
        if self.collect.grid == 0 {
            return Err(invalid("collect.grid", "must be >= 1"));
        }
        if let Some(pk) = self.gp.period_m {
            pos("gp.period_m", pk)?;
        }
        if self.gp.restarts == 0 {
            return Err(invalid("gp.restarts", "must be >= 1"));
        }
        if !(self.gp.split > 0.0 && self.gp.split <= 1.0) {
            return Err(invalid("gp.split", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = Config::from_toml("").unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.system().plant, PlantParams::default());
    }

    #[test]
    fn round_trip() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::from_toml("[plant]\nmass = 3.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mass") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn bad_value_is_named() {
        let err = Config::from_toml("[plant]\nmass_kg = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("plant.mass_kg"), "{err}");
        let err = Config::from_toml("[field]\nkind = \"constant\"\noffset_m = [0.02, 0.0]\n").unwrap_err();
        assert!(err.to_string().contains("`field`"), "{err}");
    }

    #[test]
    fn commutation_overrides_apply() {
        let cfg = Config::from_toml("[commutation_loop]\nsign = [1.0, -1.0]\nbandwidth_hz = [2.0, 2.0]\n").unwrap();
        let sys = cfg.system();
        assert_eq!(sys.commutation.sign, [1.0, -1.0]);
        assert_eq!(sys.commutation.bandwidth_hz, [2.0, 2.0]);
    }

    #[test]
    fn grid_sizes() {
        let cfg = Config::default();
        assert_eq!(cfg.collect_grid().len(), 576);
        assert_eq!(cfg.gd_config(&cfg.system()).n_p(), 36);
    }
}
