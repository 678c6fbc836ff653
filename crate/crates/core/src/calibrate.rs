//! Static gradient-descent calibration of the commutation frame.
//!
//! The objective is the sum over `n_p` hold positions of the norm of the
//! averaged steady-state feedback force, as a function of a single constant
//! frame correction η. Gradients are estimated by one-sided finite
//! differences on that objective and averaged across positions; the step
//! length comes from a backtracking line search.

use std::io::Write;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::Workspace;
use crate::sim::{SimError, SteadyStateProbe, SystemConfig};

/// Source of averaged steady-state feedback forces at a hold position with a
/// fixed frame correction.
pub trait ForceProbe: Sync {
    fn measure(&self, q: Vector2<f64>, eta: Vector2<f64>) -> Result<Vector3<f64>, SimError>;
}

impl ForceProbe for SteadyStateProbe<'_> {
    fn measure(&self, q: Vector2<f64>, eta: Vector2<f64>) -> Result<Vector3<f64>, SimError> {
        SteadyStateProbe::measure(self, q, eta)
    }
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("no descent direction found: line search exhausted at lambda = {lambda:.3e} without any accepted step")]
    NoDescent { lambda: f64, trace: Box<GdTrace> },
    #[error("invalid calibration configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdConfig {
    pub positions: Vec<[f64; 2]>,
    pub eta0: [f64; 2],
    /// Initial step size in m/N.
    pub lambda0: f64,
    /// Finite-difference perturbation per η component.
    pub xi: [f64; 2],
    pub max_iterations: usize,
    /// Step-norm threshold of the stopping rule.
    pub step_tol: f64,
    /// Relative objective decrease below which a step counts as stagnant.
    pub stagnation_tol: f64,
    /// Objective value (N) below which the current η is accepted outright.
    pub objective_tol: f64,
    /// Backtracking factor in (0, 1).
    pub beta: f64,
    pub max_backtracks: usize,
}

impl GdConfig {
    /// Defaults for a system: 6×6 grid, ξ = τ/50 and a first step no longer
    /// than τ/20.
    pub fn for_system(sys: &SystemConfig) -> Self {
        let tau = sys.plant.coil_pitch;
        let s = sys.commutation.sensitivity;
        Self {
            positions: default_positions(&sys.workspace),
            eta0: [0.0; 2],
            // one-sided differences of a norm are bounded by the slope s per
            // component, so the averaged gradient has norm at most √2·s
            lambda0: tau / 20.0 / (std::f64::consts::SQRT_2 * s),
            xi: [tau / 50.0; 2],
            max_iterations: 50,
            step_tol: tau * 1e-6,
            stagnation_tol: 1e-3,
            objective_tol: 1e-6,
            beta: 0.5,
            max_backtracks: 20,
        }
    }

    pub fn n_p(&self) -> usize {
        self.positions.len()
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        let bad = |m: &str| Err(CalibrationError::InvalidConfig(m.to_string()));
        if self.positions.is_empty() {
            return bad("at least one calibration position is required");
        }
        if self.positions.iter().flatten().chain(&self.eta0).any(|v| !v.is_finite()) {
            return bad("positions and eta0 must be finite");
        }
        if self.xi.iter().any(|x| *x == 0.0 || !x.is_finite()) {
            return bad("xi entries must be finite and nonzero");
        }
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return bad("lambda0 must be > 0");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if self.max_iterations == 0 || self.max_backtracks == 0 {
            return bad("max_iterations and max_backtracks must be >= 1");
        }
        if !(self.step_tol >= 0.0 && self.stagnation_tol >= 0.0 && self.objective_tol >= 0.0) {
            return bad("tolerances must be >= 0");
        }
        Ok(())
    }
}

/// 6×6 grid inset by half a cell from the workspace boundary.
pub fn default_positions(ws: &Workspace) -> Vec<[f64; 2]> {
    let n = 6;
    let span = ws.span();
    let inset = Workspace {
        min: [ws.min[0] + span[0] / (2 * n) as f64, ws.min[1] + span[1] / (2 * n) as f64],
        max: [ws.max[0] - span[0] / (2 * n) as f64, ws.max[1] - span[1] / (2 * n) as f64],
    };
    inset.grid(n, n).into_iter().map(|p| [p.x, p.y]).collect()
}

/// One row of the calibration trace. Row `k` holds the state at which the
/// `k`-th gradient was estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdIteration {
    pub k: usize,
    pub eta: [f64; 2],
    pub objective: f64,
    pub force_norms: Vec<f64>,
    pub gradient: [f64; 2],
    pub lambda: f64,
    pub xi: [f64; 2],
    /// Whether the line search from this state found a decrease.
    pub accepted: bool,
    pub gradient_measurements: usize,
    pub line_search_measurements: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GdTrace {
    pub iterations: Vec<GdIteration>,
    pub converged: bool,
    /// Objective at the returned η.
    pub final_objective: f64,
    pub final_eta: [f64; 2],
}

impl GdTrace {
    pub fn write_csv<W: Write>(&self, mut out: W, manifest: Option<&serde_json::Value>) -> Result<(), SimError> {
        if let Some(m) = manifest {
            writeln!(out, "# {m}")?;
        }
        let n_p = self.iterations.first().map_or(0, |it| it.force_norms.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "k", "eta_x_m", "eta_y_m", "objective_n", "grad_x_n_per_m", "grad_y_n_per_m", "lambda_m_per_n",
            "xi_x_m", "xi_y_m", "accepted", "gradient_measurements", "line_search_measurements",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..n_p).map(|i| format!("force_norm_{i}_n")));
        w.write_record(&header)?;
        for it in &self.iterations {
            let mut row = vec![
                it.k.to_string(),
                it.eta[0].to_string(),
                it.eta[1].to_string(),
                it.objective.to_string(),
                it.gradient[0].to_string(),
                it.gradient[1].to_string(),
                it.lambda.to_string(),
                it.xi[0].to_string(),
                it.xi[1].to_string(),
                (it.accepted as u8).to_string(),
                it.gradient_measurements.to_string(),
                it.line_search_measurements.to_string(),
            ];
            row.extend(it.force_norms.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn measure_all(
    probe: &dyn ForceProbe,
    points: &[(Vector2<f64>, Vector2<f64>)],
) -> Result<Vec<f64>, SimError> {
    points.par_iter().map(|(q, eta)| probe.measure(*q, *eta).map(|f| f.norm())).collect()
}

/// `J(η) = Σ_i ‖F̄_c(q_i, η)‖₂` and the per-position norms.
pub fn objective(eta: Vector2<f64>, cfg: &GdConfig, probe: &dyn ForceProbe) -> Result<(f64, Vec<f64>), SimError> {
    let points: Vec<_> = cfg.positions.iter().map(|p| (Vector2::from(*p), eta)).collect();
    let norms = measure_all(probe, &points)?;
    Ok((norms.iter().sum(), norms))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    /// One-sided difference quotient per position.
    pub per_position: Vec<Vector2<f64>>,
    /// `‖F̄_c(q_i, η)‖` at the unperturbed point.
    pub base_norms: Vec<f64>,
    /// Positions whose base and perturbed corrections both exceed `eta_limit`.
    pub saturated: Vec<bool>,
    pub measurements: usize,
}

impl GradientEstimate {
    pub fn mean(&self) -> Vector2<f64> {
        self.per_position.iter().sum::<Vector2<f64>>() / self.per_position.len() as f64
    }

    pub fn objective(&self) -> f64 {
        self.base_norms.iter().sum()
    }
}

/// One-sided finite-difference gradients at every position using
/// `n_p·(n_η + 1)` measurements.
pub fn estimate_gradient(
    eta: Vector2<f64>,
    positions: &[[f64; 2]],
    xi: [f64; 2],
    eta_limit: f64,
    probe: &dyn ForceProbe,
) -> Result<GradientEstimate, SimError> {
    let mut points = Vec::with_capacity(positions.len() * 3);
    for p in positions {
        let q = Vector2::from(*p);
        points.push((q, eta));
        for (j, &x) in xi.iter().enumerate() {
            let mut e = eta;
            e[j] += x;
            points.push((q, e));
        }
    }
    let norms = measure_all(probe, &points)?;
    let mut per_position = Vec::with_capacity(positions.len());
    let mut base_norms = Vec::with_capacity(positions.len());
    let mut saturated = Vec::with_capacity(positions.len());
    for chunk in norms.chunks(3) {
        let base = chunk[0];
        per_position.push(Vector2::new((chunk[1] - base) / xi[0], (chunk[2] - base) / xi[1]));
        base_norms.push(base);
        let over = |e: Vector2<f64>| e.amax() > eta_limit;
        saturated.push(over(eta) && (0..2).all(|j| over(eta + Vector2::ith(j, xi[j]))));
    }
    Ok(GradientEstimate { per_position, base_norms, saturated, measurements: points.len() })
}

/// Runs the calibration. Returns the final η and the trace.
///
/// ξ shrinks to half the last accepted step and by β after a failed line
/// search: near the optimum the objective has a kink and one-sided
/// differences with a large ξ no longer point downhill.
pub fn gd_calibrate(
    cfg: &GdConfig,
    eta_limit: f64,
    probe: &dyn ForceProbe,
) -> Result<(Vector2<f64>, GdTrace), CalibrationError> {
    cfg.validate()?;
    let mut trace = GdTrace::default();
    let mut eta = Vector2::from(cfg.eta0);
    let mut lambda = cfg.lambda0;
    let mut xi = cfg.xi;
    let mut any_accepted = false;
    let mut objective_now = f64::NAN;

    for k in 0..cfg.max_iterations {
        let grad = estimate_gradient(eta, &cfg.positions, xi, eta_limit, probe)?;
        let j_k = grad.objective();
        objective_now = j_k;
        let g = grad.mean();
        let mut row = GdIteration {
            k,
            eta: eta.into(),
            objective: j_k,
            force_norms: grad.base_norms.clone(),
            gradient: g.into(),
            lambda,
            xi,
            accepted: false,
            gradient_measurements: grad.measurements,
            line_search_measurements: 0,
        };
        if j_k < cfg.objective_tol {
            trace.iterations.push(row);
            trace.converged = true;
            break;
        }

        let mut trial_lambda = lambda;
        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            let candidate = eta - trial_lambda * g;
            let (j_new, _) = objective(candidate, cfg, probe)?;
            row.line_search_measurements += cfg.n_p();
            if j_new < j_k {
                accepted = Some((candidate, j_new));
                break;
            }
            trial_lambda *= cfg.beta;
        }
        row.lambda = trial_lambda;

        match accepted {
            Some((candidate, j_new)) => {
                row.accepted = true;
                any_accepted = true;
                trace.iterations.push(row);
                let step = (candidate - eta).norm();
                eta = candidate;
                objective_now = j_new;
                lambda = trial_lambda / cfg.beta;
                // keep the difference quotient on the scale of the distance
                // still to go
                xi = xi.map(|x| x.signum() * x.abs().min(step / 2.0).max(cfg.step_tol / 2.0));
                if j_new < cfg.objective_tol
                    || (step < cfg.step_tol && j_k - j_new < cfg.stagnation_tol * j_k)
                {
                    trace.converged = true;
                    break;
                }
            }
            None => {
                let first_step = lambda * g.norm();
                trace.iterations.push(row);
                if !any_accepted && trial_lambda < f64::MIN_POSITIVE.sqrt() {
                    trace.final_eta = eta.into();
                    trace.final_objective = j_k;
                    return Err(CalibrationError::NoDescent { lambda: trial_lambda, trace: Box::new(trace) });
                }
                if first_step < cfg.step_tol && xi.iter().all(|x| x.abs() < cfg.step_tol) {
                    trace.converged = true;
                    break;
                }
                xi = xi.map(|x| x * cfg.beta);
                lambda *= cfg.beta;
            }
        }
    }
    if !any_accepted && !trace.converged {
        let lambda_now = trace.iterations.last().map_or(lambda, |r| r.lambda);
        trace.final_eta = eta.into();
        trace.final_objective = objective_now;
        return Err(CalibrationError::NoDescent { lambda: lambda_now, trace: Box::new(trace) });
    }
    trace.final_eta = eta.into();
    trace.final_objective = objective_now;
    Ok((eta, trace))
}

/// Calibration against the closed-loop simulation, returning the number of
/// steady-state measurements issued as well.
pub fn calibrate_system(sys: &SystemConfig, cfg: &GdConfig) -> Result<(Vector2<f64>, GdTrace, usize), CalibrationError> {
    let probe = SteadyStateProbe::new(sys);
    let (eta, trace) = gd_calibrate(cfg, sys.commutation.limit, &probe)?;
    Ok((eta, trace, probe.count()))
}
