//! Closed-loop simulation engine and experiment protocols.
//!
//! A [`ClosedLoop`] executes one control sample: measure position, compute
//! feedback and feedforward forces, update the frame correction, push the
//! commanded wrench through the mismatched commutation and integrate the
//! mover. The protocols on top of it are scan scenarios, steady-state force
//! measurements with a fixed frame correction, and set-point holds with the
//! commutation regulator that produce the η* training data.

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{
    commutation_regulator_step, rigid_body_feedforward, total_frame_correction,
    CommutationLoopParams, CommutationState, PositionController, PositionLoopParams,
};
use crate::plant::{apply_wrench, step_dynamics, MismatchField, PlantParams, PlantState, Workspace};
use crate::trajectory::{plan_fourth_order, ProfileError, ProfileParams, ScanAxis};

/// Guard on the position error beyond which a run is aborted.
pub const DIVERGENCE_LIMIT_M: f64 = 10e-3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("numerical divergence at t = {t:.6} s (|e_pos| = {error:.3e} m)")]
    NumericalDivergence { t: f64, error: f64, partial: Option<Box<SimLog>> },
    #[error("invalid simulation configuration: {0}")]
    InvalidConfig(String),
    #[error("mode dynamic+ff requires a fitted feedforward model")]
    MissingFeedforward,
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("log format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Which of the commutation corrections are active in a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "static-calibrated")]
    StaticCalibrated,
    #[serde(rename = "dynamic")]
    Dynamic,
    #[serde(rename = "dynamic+ff", alias = "dynamic-ff")]
    DynamicFf,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::StaticCalibrated, Mode::Dynamic, Mode::DynamicFf];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::StaticCalibrated => "static-calibrated",
            Mode::Dynamic => "dynamic",
            Mode::DynamicFf => "dynamic+ff",
        }
    }

    /// File-name friendly variant of [`Mode::name`].
    pub fn slug(self) -> &'static str {
        match self {
            Mode::DynamicFf => "dynamic-ff",
            m => m.name(),
        }
    }

    pub fn regulator_enabled(self) -> bool {
        matches!(self, Mode::Dynamic | Mode::DynamicFf)
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "static-calibrated" | "static" => Ok(Mode::StaticCalibrated),
            "dynamic" => Ok(Mode::Dynamic),
            "dynamic+ff" | "dynamic-ff" => Ok(Mode::DynamicFf),
            other => Err(format!(
                "unknown mode `{other}` (expected baseline, static-calibrated, dynamic, dynamic+ff)"
            )),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Position-dependent frame-correction feedforward, evaluated at the
/// reference position.
pub trait FrameFeedforward: Sync {
    fn eta_ff(&self, r: Vector2<f64>) -> Vector2<f64>;
}

/// Plant, mismatch field and controllers shared by every protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub plant: PlantParams,
    pub field: MismatchField,
    pub position: PositionLoopParams,
    pub commutation: CommutationLoopParams,
    pub workspace: Workspace,
    /// Standard deviation of additive position measurement noise.
    pub noise_std_m: f64,
    pub seed: u64,
}

impl SystemConfig {
    /// Default plant and controllers around the given field.
    pub fn with_field(field: MismatchField) -> Self {
        let plant = PlantParams::default();
        let position = PositionLoopParams::for_plant(&plant);
        let commutation = CommutationLoopParams::for_plant(&plant, &position);
        Self { plant, field, position, commutation, workspace: Workspace::default(), noise_std_m: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| SimError::InvalidConfig(m);
        self.plant.validate().map_err(|e| bad(e.to_string()))?;
        self.field.validate(self.plant.coil_pitch).map_err(|e| bad(e.to_string()))?;
        self.position.validate().map_err(|e| bad(format!("position loop: {e}")))?;
        self.commutation.validate().map_err(|e| bad(format!("commutation loop: {e}")))?;
        if (self.position.dt - self.plant.dt).abs() > 0.0 || (self.commutation.dt - self.plant.dt).abs() > 0.0 {
            return Err(bad("controllers must run at the plant sample period".into()));
        }
        if !(self.noise_std_m.is_finite() && self.noise_std_m >= 0.0) {
            return Err(bad(format!("noise std must be >= 0, got {}", self.noise_std_m)));
        }
        Ok(())
    }

    /// Slowest position-loop bandwidth.
    pub fn position_bandwidth(&self) -> f64 {
        self.position.bandwidth_hz.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Slowest commutation-loop bandwidth.
    pub fn commutation_bandwidth(&self) -> f64 {
        self.commutation.bandwidth_hz.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn default_settle_time(&self) -> f64 {
        20.0 / self.position_bandwidth()
    }

    pub fn default_average_time(&self) -> f64 {
        10.0 / self.position_bandwidth()
    }

    pub fn default_hold_time(&self) -> f64 {
        5.0 / self.commutation_bandwidth()
    }
}

/// Output of one control sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub e_pos: Vector3<f64>,
    pub f_c: Vector3<f64>,
    pub f_ff: Vector3<f64>,
    pub eta_fb: Vector2<f64>,
    pub eta_ff: Vector2<f64>,
    pub f_m: Vector3<f64>,
    pub saturation: u8,
}

/// Saturation bits in [`SimRecord::saturation`].
pub const SAT_REGULATOR_X: u8 = 1;
pub const SAT_REGULATOR_Y: u8 = 2;
pub const SAT_TOTAL_X: u8 = 4;
pub const SAT_TOTAL_Y: u8 = 8;

/// Mover, controllers and regulator state of one simulation instance.
pub struct ClosedLoop<'a> {
    sys: &'a SystemConfig,
    pub state: PlantState,
    controller: PositionController,
    pub commutation: CommutationState,
    noise: Option<(ChaCha8Rng, Normal<f64>)>,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(sys: &'a SystemConfig, q0: Vector3<f64>, eta0: Vector2<f64>, regulator: bool, seed: u64) -> Self {
        let noise = (sys.noise_std_m > 0.0).then(|| {
            (ChaCha8Rng::seed_from_u64(seed), Normal::new(0.0, sys.noise_std_m).expect("finite std"))
        });
        Self {
            sys,
            state: PlantState::at_rest(q0),
            controller: PositionController::new(&sys.position),
            commutation: CommutationState::new(eta0, regulator),
            noise,
        }
    }

    pub fn controller(&self) -> &PositionController {
        &self.controller
    }

    /// One control sample with reference `r`, feedforward acceleration
    /// `a_ref` and frame feedforward `eta_ff`.
    pub fn step(&mut self, r: Vector3<f64>, a_ref: Vector3<f64>, eta_ff: Vector2<f64>) -> StepOutput {
        let plant = &self.sys.plant;
        let mut q_meas = self.state.q;
        if let Some((rng, dist)) = self.noise.as_mut() {
            for i in 0..3 {
                q_meas[i] += dist.sample(rng);
            }
        }
        let e_pos = r - q_meas;
        let f_c = self.controller.position_feedback(e_pos);
        let f_ff = rigid_body_feedforward(a_ref, plant.mass, plant.gravity);
        let f_ref = f_c + f_ff;
        self.commutation = commutation_regulator_step(f_c, &self.commutation, &self.sys.commutation);
        let (eta, total_sat) = total_frame_correction(&self.commutation, eta_ff, self.sys.commutation.limit);
        let f_m = apply_wrench(&self.state, f_ref, &self.sys.field, eta, plant);
        self.state = step_dynamics(&self.state, f_m, plant);
        let mut saturation = 0;
        for (flag, bit) in [
            (self.commutation.saturated[0], SAT_REGULATOR_X),
            (self.commutation.saturated[1], SAT_REGULATOR_Y),
            (total_sat[0], SAT_TOTAL_X),
            (total_sat[1], SAT_TOTAL_Y),
        ] {
            if flag {
                saturation |= bit;
            }
        }
        StepOutput { e_pos, f_c, f_ff, eta_fb: self.commutation.eta, eta_ff, f_m, saturation }
    }
}

/// Scan experiment on top of a [`SystemConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub system: SystemConfig,
    pub mode: Mode,
    pub profile: ProfileParams,
    /// In-plane position where the scan starts.
    pub start_m: [f64; 2],
    /// Frame correction at t = 0 (regulator initial state in dynamic modes).
    pub initial_eta_m: [f64; 2],
    /// Calibrated static correction, required in static-calibrated mode.
    pub static_eta_m: Option<[f64; 2]>,
    /// Set-point hold before the scan starts.
    pub pre_hold_s: f64,
    pub duration_s: f64,
}

impl ScenarioConfig {
    /// Default scan: full-stroke profile along y through the workspace
    /// center, preceded by a hold long enough for the regulator to settle.
    pub fn new(system: SystemConfig, mode: Mode) -> Self {
        let profile = ProfileParams { dt: system.plant.dt, ..ProfileParams::default() };
        let pre_hold_s = system.default_hold_time();
        let mut cfg = Self {
            system,
            mode,
            profile,
            start_m: [0.0, -0.025],
            initial_eta_m: [0.0; 2],
            static_eta_m: None,
            pre_hold_s,
            duration_s: 0.0,
        };
        cfg.duration_s = cfg.default_duration();
        cfg
    }

    /// Pre-hold, the full move and a 0.1 s post-hold.
    pub fn default_duration(&self) -> f64 {
        let move_time = plan_fourth_order(&self.profile).map(|p| p.duration).unwrap_or(0.0);
        self.pre_hold_s + move_time + 0.1
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.system.validate()?;
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if (self.profile.dt - self.system.plant.dt).abs() > 0.0 {
            return bad("profile sample period must equal the plant sample period".into());
        }
        if !(self.pre_hold_s >= 0.0 && self.duration_s > 0.0) {
            return bad("pre_hold_s must be >= 0 and duration_s > 0".into());
        }
        if self.mode == Mode::StaticCalibrated && self.static_eta_m.is_none() {
            return bad("static-calibrated mode requires static_eta_m".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        crate::io::sha256_hex(serde_json::to_string(self).expect("serializable").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimHeader {
    pub mode: Mode,
    pub dt: f64,
    pub scan_axis: ScanAxis,
    /// Cruise window in simulation time.
    pub cruise_window: (f64, f64),
    pub config_hash: String,
    pub position_gains: [f64; 3],
    pub commutation_gains: [f64; 2],
    pub samples: usize,
}

/// One logged control sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimRecord {
    pub t: f64,
    pub r: [f64; 3],
    pub q: [f64; 3],
    pub e_pos: [f64; 3],
    pub f_c: [f64; 3],
    pub f_ff: [f64; 3],
    pub eta_fb: [f64; 2],
    pub eta_ff: [f64; 2],
    pub f_m: [f64; 3],
    pub saturation: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub header: SimHeader,
    pub records: Vec<SimRecord>,
}

const LOG_COLUMNS: [&str; 27] = [
    "t_s", "r_x_m", "r_y_m", "r_z_m", "q_x_m", "q_y_m", "q_z_m", "e_x_m", "e_y_m", "e_z_m",
    "fc_x_n", "fc_y_n", "fc_z_n", "fff_x_n", "fff_y_n", "fff_z_n", "eta_fb_x_m", "eta_fb_y_m",
    "eta_ff_x_m", "eta_ff_y_m", "fm_x_n", "fm_y_n", "fm_z_n", "saturation", "", "", "",
];

impl SimLog {
    pub fn time(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    /// Writes the log as CSV: a `#`-prefixed JSON line holding the manifest
    /// and header, a column header row, then one row per sample.
    pub fn write_csv<W: Write>(&self, mut out: W, manifest: Option<&serde_json::Value>) -> Result<(), SimError> {
        let meta = serde_json::json!({ "manifest": manifest, "log": self.header });
        writeln!(out, "# {meta}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&LOG_COLUMNS[..24])?;
        for r in &self.records {
            let mut row: Vec<String> = Vec::with_capacity(24);
            row.push(r.t.to_string());
            for arr in [&r.r[..], &r.q, &r.e_pos, &r.f_c, &r.f_ff, &r.eta_fb, &r.eta_ff, &r.f_m] {
                row.extend(arr.iter().map(|v| v.to_string()));
            }
            row.push(r.saturation.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(mut input: R) -> Result<Self, SimError> {
        let mut first = String::new();
        input.read_line(&mut first)?;
        let json = first
            .strip_prefix('#')
            .ok_or_else(|| SimError::Format("missing `#` header line".into()))?;
        let meta: serde_json::Value =
            serde_json::from_str(json.trim()).map_err(|e| SimError::Format(format!("header: {e}")))?;
        let header: SimHeader = serde_json::from_value(meta["log"].clone())
            .map_err(|e| SimError::Format(format!("header: {e}")))?;
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            if row.len() != 24 {
                return Err(SimError::Format(format!("expected 24 columns, got {}", row.len())));
            }
            let v = |i: usize| -> Result<f64, SimError> {
                row[i].parse::<f64>().map_err(|e| SimError::Format(format!("column {}: {e}", LOG_COLUMNS[i])))
            };
            let arr3 = |i: usize| -> Result<[f64; 3], SimError> { Ok([v(i)?, v(i + 1)?, v(i + 2)?]) };
            let arr2 = |i: usize| -> Result<[f64; 2], SimError> { Ok([v(i)?, v(i + 1)?]) };
            records.push(SimRecord {
                t: v(0)?,
                r: arr3(1)?,
                q: arr3(4)?,
                e_pos: arr3(7)?,
                f_c: arr3(10)?,
                f_ff: arr3(13)?,
                eta_fb: arr2(16)?,
                eta_ff: arr2(18)?,
                f_m: arr3(20)?,
                saturation: row[23].parse().map_err(|e| SimError::Format(format!("saturation: {e}")))?,
            });
        }
        Ok(Self { header, records })
    }
}

/// Reference trajectory of a scenario, generated from the nominal
/// rigid-body model so that the feedforward force reproduces it exactly
/// at the sample instants.
struct ScanReference {
    position: Vec<Vector3<f64>>,
    accel: Vec<Vector3<f64>>,
    cruise: (f64, f64),
}

fn scan_reference(cfg: &ScenarioConfig, n: usize) -> Result<ScanReference, SimError> {
    let profile = plan_fourth_order(&cfg.profile)?;
    let dt = cfg.system.plant.dt;
    let axis = cfg.profile.axis.index();
    let t0 = cfg.pre_hold_s;
    let vel = |t: f64| profile.exact(t - t0).v;
    let mut position = Vec::with_capacity(n);
    let mut accel = Vec::with_capacity(n);
    let mut p = Vector3::new(cfg.start_m[0], cfg.start_m[1], 0.0);
    let mut v = 0.0;
    for k in 0..n {
        let (ta, tb) = (k as f64 * dt, (k + 1) as f64 * dt);
        // mean acceleration over the sample keeps the sampled velocity exact
        let a = (vel(tb) - vel(ta)) / dt;
        let mut acc = Vector3::zeros();
        acc[axis] = a;
        position.push(p);
        accel.push(acc);
        p[axis] += v * dt + 0.5 * a * dt * dt;
        v += a * dt;
    }
    Ok(ScanReference { position, accel, cruise: (t0 + profile.cruise.0, t0 + profile.cruise.1) })
}

/// Runs a scan scenario and returns the full log.
pub fn run_scenario(cfg: &ScenarioConfig, ff: Option<&dyn FrameFeedforward>) -> Result<SimLog, SimError> {
    cfg.validate()?;
    if cfg.mode == Mode::DynamicFf && ff.is_none() {
        return Err(SimError::MissingFeedforward);
    }
    let sys = &cfg.system;
    let dt = sys.plant.dt;
    let n = (cfg.duration_s / dt).round() as usize;
    let reference = scan_reference(cfg, n)?;
    let eta0 = match cfg.mode {
        Mode::StaticCalibrated => Vector2::from(cfg.static_eta_m.expect("validated")),
        _ => Vector2::from(cfg.initial_eta_m),
    };
    let mut cl = ClosedLoop::new(sys, reference.position[0], eta0, cfg.mode.regulator_enabled(), sys.seed);
    let header = SimHeader {
        mode: cfg.mode,
        dt,
        scan_axis: cfg.profile.axis,
        cruise_window: reference.cruise,
        config_hash: cfg.hash(),
        position_gains: cl.controller().gains(),
        commutation_gains: sys.commutation.integral_gain(),
        samples: n,
    };
    let mut log = SimLog { header, records: Vec::with_capacity(n) };
    for k in 0..n {
        let t = k as f64 * dt;
        let r = reference.position[k];
        let eta_ff = match (cfg.mode, ff) {
            (Mode::DynamicFf, Some(model)) => model.eta_ff(r.xy()),
            _ => Vector2::zeros(),
        };
        let q = cl.state.q;
        let out = cl.step(r, reference.accel[k], eta_ff);
        log.records.push(SimRecord {
            t,
            r: r.into(),
            q: q.into(),
            e_pos: out.e_pos.into(),
            f_c: out.f_c.into(),
            f_ff: out.f_ff.into(),
            eta_fb: out.eta_fb.into(),
            eta_ff: out.eta_ff.into(),
            f_m: out.f_m.into(),
            saturation: out.saturation,
        });
        let err = out.e_pos.amax();
        if !err.is_finite() || err > DIVERGENCE_LIMIT_M {
            log.header.samples = log.records.len();
            return Err(SimError::NumericalDivergence { t, error: err, partial: Some(Box::new(log)) });
        }
    }
    Ok(log)
}

/// Mixes a base seed with the bit patterns of `values` (splitmix64).
pub fn derive_seed(base: u64, values: &[f64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    values.iter().fold(mix(base), |acc, v| mix(acc ^ v.to_bits()))
}

fn check_time(name: &str, value: f64, min: f64) -> Result<(), SimError> {
    if value + 1e-12 < min || !value.is_finite() {
        return Err(SimError::InvalidConfig(format!("{name} = {value} s is below the minimum {min} s")));
    }
    Ok(())
}

/// Holds `q_hold` with a fixed frame correction and returns the feedback
/// force averaged over `[t_settle, t_settle + t_avg]`.
pub fn measure_steady_state_force(
    sys: &SystemConfig,
    q_hold: Vector2<f64>,
    eta: Vector2<f64>,
    t_settle: f64,
    t_avg: f64,
) -> Result<Vector3<f64>, SimError> {
    check_time("settle time", t_settle, sys.default_settle_time())?;
    check_time("averaging time", t_avg, sys.default_average_time())?;
    let dt = sys.plant.dt;
    let r = Vector3::new(q_hold.x, q_hold.y, 0.0);
    let n_settle = (t_settle / dt).round() as usize;
    let n_avg = (t_avg / dt).round().max(1.0) as usize;
    let seed = derive_seed(sys.seed, &[q_hold.x, q_hold.y, eta.x, eta.y]);
    let mut cl = ClosedLoop::new(sys, r, eta, false, seed);
    let mut sum = Vector3::zeros();
    for k in 0..n_settle + n_avg {
        let out = cl.step(r, Vector3::zeros(), Vector2::zeros());
        let err = out.e_pos.amax();
        if !err.is_finite() || err > DIVERGENCE_LIMIT_M {
            return Err(SimError::NumericalDivergence { t: k as f64 * dt, error: err, partial: None });
        }
        if k >= n_settle {
            sum += out.f_c;
        }
    }
    Ok(sum / n_avg as f64)
}

/// Sign of the commutation loop per axis that yields negative feedback,
/// identified from the finite-difference slope of the steady-state
/// feedback force with respect to the frame correction.
pub fn identify_regulator_sign(sys: &SystemConfig, q_hold: Vector2<f64>, step: f64) -> Result<[f64; 2], SimError> {
    let (ts, ta) = (sys.default_settle_time(), sys.default_average_time());
    let mut sign = [0.0; 2];
    for j in 0..2 {
        let mut de = Vector2::zeros();
        de[j] = step;
        let hi = measure_steady_state_force(sys, q_hold, de, ts, ta)?;
        let lo = measure_steady_state_force(sys, q_hold, -de, ts, ta)?;
        let slope = (hi[j] - lo[j]) / (2.0 * step);
        sign[j] = if slope > 0.0 { -1.0 } else { 1.0 };
    }
    Ok(sign)
}

/// Counts steady-state measurements issued through it.
pub struct SteadyStateProbe<'a> {
    pub sys: &'a SystemConfig,
    pub t_settle: f64,
    pub t_avg: f64,
    count: AtomicUsize,
}

impl<'a> SteadyStateProbe<'a> {
    pub fn new(sys: &'a SystemConfig) -> Self {
        Self { sys, t_settle: sys.default_settle_time(), t_avg: sys.default_average_time(), count: AtomicUsize::new(0) }
    }

    pub fn measure(&self, q: Vector2<f64>, eta: Vector2<f64>) -> Result<Vector3<f64>, SimError> {
        self.count.fetch_add(1, Ordering::Relaxed);
        measure_steady_state_force(self.sys, q, eta, self.t_settle, self.t_avg)
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }
}

/// One set-point of the η* dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaRecord {
    pub index: usize,
    pub x_m: f64,
    pub y_m: f64,
    pub eta_x_m: f64,
    pub eta_y_m: f64,
    /// False when the hold diverged; η* is then NaN.
    pub valid: bool,
}

impl EtaRecord {
    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x_m, self.y_m)
    }

    pub fn eta(&self) -> Vector2<f64> {
        Vector2::new(self.eta_x_m, self.eta_y_m)
    }
}

/// Settled regulator outputs at a set of set-points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EtaDataset {
    pub records: Vec<EtaRecord>,
}

impl EtaDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn valid(&self) -> impl Iterator<Item = &EtaRecord> {
        self.records.iter().filter(|r| r.valid)
    }

    pub fn write_csv<W: Write>(&self, mut out: W, manifest: Option<&serde_json::Value>) -> Result<(), SimError> {
        if let Some(m) = manifest {
            writeln!(out, "# {m}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "x_m", "y_m", "eta_x_m", "eta_y_m", "valid"])?;
        for r in &self.records {
            w.write_record([
                r.index.to_string(),
                r.x_m.to_string(),
                r.y_m.to_string(),
                r.eta_x_m.to_string(),
                r.eta_y_m.to_string(),
                (r.valid as u8).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, SimError> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let mut records = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row?;
            if row.len() != 6 {
                return Err(SimError::Format(format!("row {}: expected 6 columns, got {}", line + 1, row.len())));
            }
            let f = |i: usize| -> Result<f64, SimError> {
                row[i].trim().parse().map_err(|e| SimError::Format(format!("row {} column {i}: {e}", line + 1)))
            };
            let index = row[0].trim().parse().map_err(|e| SimError::Format(format!("row {}: {e}", line + 1)))?;
            let valid = match row[5].trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(SimError::Format(format!("row {}: bad valid flag `{other}`", line + 1))),
            };
            records.push(EtaRecord { index, x_m: f(1)?, y_m: f(2)?, eta_x_m: f(3)?, eta_y_m: f(4)?, valid });
        }
        Ok(Self { records })
    }
}

/// Holds `q` with the commutation regulator active for `t_hold` and returns
/// the regulator output averaged over the final 10 % of the hold.
pub fn settle_eta(sys: &SystemConfig, q: Vector2<f64>, eta0: Vector2<f64>, t_hold: f64) -> Result<Vector2<f64>, SimError> {
    let dt = sys.plant.dt;
    let n = (t_hold / dt).round() as usize;
    let n_tail = (n / 10).max(1);
    let r = Vector3::new(q.x, q.y, 0.0);
    let seed = derive_seed(sys.seed, &[q.x, q.y]);
    let mut cl = ClosedLoop::new(sys, r, eta0, true, seed);
    let mut sum = Vector2::zeros();
    for k in 0..n {
        let out = cl.step(r, Vector3::zeros(), Vector2::zeros());
        let err = out.e_pos.amax();
        if !err.is_finite() || err > DIVERGENCE_LIMIT_M {
            return Err(SimError::NumericalDivergence { t: k as f64 * dt, error: err, partial: None });
        }
        if k >= n - n_tail {
            sum += out.eta_fb;
        }
    }
    Ok(sum / n_tail as f64)
}

/// Runs a regulated set-point hold at every grid point. Points are
/// independent and may be dispatched to `workers` threads; results are
/// ordered by grid index.
pub fn collect_eta_grid(
    sys: &SystemConfig,
    grid: &[Vector2<f64>],
    t_hold: f64,
    eta0: Vector2<f64>,
    workers: Option<usize>,
) -> Result<EtaDataset, SimError> {
    sys.validate()?;
    check_time("hold time", t_hold, sys.default_hold_time())?;
    let run = |(i, q): (usize, &Vector2<f64>)| {
        let (eta, valid) = match settle_eta(sys, *q, eta0, t_hold) {
            Ok(e) => (e, true),
            Err(SimError::NumericalDivergence { .. }) => (Vector2::repeat(f64::NAN), false),
            Err(e) => return Err(e),
        };
        Ok(EtaRecord { index: i, x_m: q.x, y_m: q.y, eta_x_m: eta.x, eta_y_m: eta.y, valid })
    };
    let records: Result<Vec<_>, SimError> = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?
            .install(|| grid.par_iter().enumerate().map(run).collect()),
        None => grid.par_iter().enumerate().map(run).collect(),
    };
    Ok(EtaDataset { records: records? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::delta_field;

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            assert_eq!(m.slug().parse::<Mode>().unwrap(), m);
        }
        assert!("fast".parse::<Mode>().is_err());
    }

    #[test]
    fn static_mode_requires_eta() {
        let cfg = ScenarioConfig::new(SystemConfig::with_field(MismatchField::zero()), Mode::StaticCalibrated);
        assert!(matches!(run_scenario(&cfg, None), Err(SimError::InvalidConfig(_))));
    }

    #[test]
    fn feedforward_mode_requires_model() {
        let cfg = ScenarioConfig::new(SystemConfig::with_field(MismatchField::zero()), Mode::DynamicFf);
        assert!(matches!(run_scenario(&cfg, None), Err(SimError::MissingFeedforward)));
    }

    #[test]
    fn short_settle_rejected() {
        let sys = SystemConfig::with_field(MismatchField::zero());
        let r = measure_steady_state_force(&sys, Vector2::zeros(), Vector2::zeros(), 0.01, 0.1);
        assert!(matches!(r, Err(SimError::InvalidConfig(_))));
    }

    #[test]
    fn zero_mismatch_gives_zero_force() {
        let sys = SystemConfig::with_field(MismatchField::zero());
        let f = measure_steady_state_force(&sys, Vector2::new(0.01, 0.02), Vector2::zeros(), sys.default_settle_time(), sys.default_average_time()).unwrap();
        assert!(f.amax() < 1e-9, "{f}");
    }

    #[test]
    fn perfect_eta_gives_zero_force() {
        let sys = SystemConfig::with_field(MismatchField::constant([3e-5, -2e-5]));
        let f = measure_steady_state_force(&sys, Vector2::new(0.01, 0.02), Vector2::new(3e-5, -2e-5), sys.default_settle_time(), sys.default_average_time()).unwrap();
        assert!(f.amax() < 1e-6, "{f}");
    }

    #[test]
    fn regulator_sign_identified_as_negative_feedback() {
        let sys = SystemConfig::with_field(MismatchField::constant([2e-5, 1e-5]));
        let sign = identify_regulator_sign(&sys, Vector2::zeros(), 1e-5).unwrap();
        assert_eq!(sign, sys.commutation.sign);
    }

    #[test]
    fn settled_eta_recovers_constant_field() {
        let sys = SystemConfig::with_field(MismatchField::constant([3e-5, -2e-5]));
        let eta = settle_eta(&sys, Vector2::new(0.03, 0.01), Vector2::zeros(), sys.default_hold_time()).unwrap();
        let truth = delta_field(&sys.field, Vector2::new(0.03, 0.01));
        assert!((eta - truth).amax() < 0.01 * truth.amax(), "{eta} vs {truth}");
    }

    #[test]
    fn eta_dataset_csv_round_trip() {
        let ds = EtaDataset {
            records: vec![
                EtaRecord { index: 0, x_m: 0.1, y_m: -0.1, eta_x_m: 1.25e-5, eta_y_m: -3e-6, valid: true },
                EtaRecord { index: 1, x_m: 0.0, y_m: 0.05, eta_x_m: f64::NAN, eta_y_m: f64::NAN, valid: false },
            ],
        };
        let mut buf = Vec::new();
        ds.write_csv(&mut buf, Some(&serde_json::json!({"command": "collect"}))).unwrap();
        let back = EtaDataset::read_csv(&buf[..]).unwrap();
        assert_eq!(back.records[0], ds.records[0]);
        assert!(!back.records[1].valid && back.records[1].eta_x_m.is_nan());
    }

    #[test]
    fn dataset_parse_error_names_row() {
        let text = "i,x_m,y_m,eta_x_m,eta_y_m,valid\n0,0.1,0.2,abc,0,1\n";
        let err = EtaDataset::read_csv(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }
}
