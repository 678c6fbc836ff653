//! Gaussian-process model of the commutation-frame discrepancy and its use
//! as a position-dependent frame feedforward.
//!
//! Each in-plane axis has an independent zero-mean scalar GP over the 2-D
//! position with a product RBF × periodic kernel. The periodic term has a
//! spatial period `p_κ` (the coil pitch by default).

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{EtaDataset, FrameFeedforward};

/// Model file format version.
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("Gram matrix is not positive definite even with jitter {jitter:.3e}")]
    NotPositiveDefinite { jitter: f64 },
    #[error("best fit ratio undefined: targets are constant")]
    DegenerateTargets,
    #[error("invalid GP input: {0}")]
    InvalidInput(String),
    #[error("model file error: {0}")]
    Format(String),
}

/// Hyperparameters of one axis. Length-scale entries are the squared
/// denominators of the exponent, not length scales themselves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    /// Signal variance σ²₁ (m²).
    pub signal_var: f64,
    /// RBF denominators σ²₂, σ²₃ for x and y (m²).
    pub rbf_len2: [f64; 2],
    /// Periodic denominators σ²₄, σ²₅ (dimensionless).
    pub periodic_len2: [f64; 2],
    /// Observation noise variance σ²_ε (m²).
    pub noise_var: f64,
    /// Spatial period of the periodic term (m).
    pub period: f64,
}

impl KernelParams {
    /// Starting point scaled to the target variance and the coil pitch.
    pub fn initial_guess(target_var: f64, period: f64) -> Self {
        let v = if target_var > 0.0 { target_var } else { 1e-12 };
        Self {
            signal_var: v,
            rbf_len2: [0.05 * 0.05; 2],
            periodic_len2: [1.0; 2],
            noise_var: 1e-4 * v,
            period,
        }
    }

    pub fn validate(&self) -> Result<(), GpError> {
        let vals = [
            self.signal_var,
            self.rbf_len2[0],
            self.rbf_len2[1],
            self.periodic_len2[0],
            self.periodic_len2[1],
            self.noise_var,
            self.period,
        ];
        if vals.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(GpError::InvalidInput(format!("kernel parameters must be finite and > 0: {self:?}")));
        }
        Ok(())
    }

    /// The six tuned parameters in log space; the period stays fixed.
    fn to_log(self) -> [f64; 6] {
        [
            self.signal_var.ln(),
            self.rbf_len2[0].ln(),
            self.rbf_len2[1].ln(),
            self.periodic_len2[0].ln(),
            self.periodic_len2[1].ln(),
            self.noise_var.ln(),
        ]
    }

    fn from_log(x: &[f64], period: f64) -> Self {
        Self {
            signal_var: x[0].exp(),
            rbf_len2: [x[1].exp(), x[2].exp()],
            periodic_len2: [x[3].exp(), x[4].exp()],
            noise_var: x[5].exp(),
            period,
        }
    }
}

/// Product RBF × periodic covariance between two positions.
pub fn kernel_eval(w: Vector2<f64>, w2: Vector2<f64>, p: &KernelParams) -> f64 {
    let mut exponent = 0.0;
    for v in 0..2 {
        let d = w[v] - w2[v];
        let s = (PI * d / p.period).sin();
        exponent += d * d / p.rbf_len2[v] + 2.0 * s * s / p.periodic_len2[v];
    }
    p.signal_var * (-exponent).exp()
}

pub fn gram_matrix(inputs: &[Vector2<f64>], p: &KernelParams) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = p.signal_var;
        for j in 0..i {
            let v = kernel_eval(inputs[i], inputs[j], p);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Fitted scalar GP for one axis.
#[derive(Debug, Clone)]
pub struct AxisGp {
    pub inputs: Vec<Vector2<f64>>,
    pub targets: DVector<f64>,
    pub params: KernelParams,
    /// Extra diagonal added on top of the noise variance to factorize.
    pub jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl AxisGp {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Lower-triangular factor of `K + (σ²_ε + jitter)·I`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    fn cross_cov(&self, w: Vector2<f64>) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.inputs.iter().map(|x| kernel_eval(*x, w, &self.params)))
    }

    pub fn predict_mean(&self, w: Vector2<f64>) -> f64 {
        self.cross_cov(w).dot(&self.alpha)
    }
}

/// Factorizes the Gram matrix of `inputs` and caches `α`. The diagonal is
/// escalated from `σ²_ε` by jitter up to `1e-8·σ²₁` when needed.
pub fn gp_fit(inputs: &[Vector2<f64>], targets: &[f64], params: KernelParams) -> Result<AxisGp, GpError> {
    params.validate()?;
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(GpError::InvalidInput(format!(
            "need matching non-empty inputs and targets, got {} and {}",
            inputs.len(),
            targets.len()
        )));
    }
    if inputs.iter().any(|w| !(w.x.is_finite() && w.y.is_finite())) || targets.iter().any(|y| !y.is_finite()) {
        return Err(GpError::InvalidInput("inputs and targets must be finite".into()));
    }
    let k = gram_matrix(inputs, &params);
    let max_jitter = 1e-8 * params.signal_var;
    let mut jitter = 0.0;
    loop {
        let mut m = k.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += params.noise_var + jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            let y = DVector::from_column_slice(targets);
            let alpha = chol.solve(&y);
            return Ok(AxisGp { inputs: inputs.to_vec(), targets: y, params, jitter, chol, alpha });
        }
        if jitter >= max_jitter {
            return Err(GpError::NotPositiveDefinite { jitter });
        }
        jitter = if jitter == 0.0 { 1e-12 * params.signal_var } else { (jitter * 10.0).min(max_jitter) };
    }
}

/// Posterior mean and variance at `w`. The variance is clamped at zero.
pub fn gp_predict(gp: &AxisGp, w: Vector2<f64>) -> (f64, f64) {
    let ks = gp.cross_cov(w);
    let mean = ks.dot(&gp.alpha);
    // only the lower triangle of the dirty factor is read
    let v = gp.chol.l_dirty().solve_lower_triangular(&ks).expect("factor has a nonzero diagonal");
    let var = gp.params.signal_var - v.norm_squared();
    (mean, var.max(0.0))
}

/// `−½ yᵀα − Σ log L_ii − (N/2) log 2π`.
pub fn log_marginal_likelihood(gp: &AxisGp) -> f64 {
    let n = gp.len() as f64;
    let log_det_half: f64 = gp.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    -0.5 * gp.targets.dot(&gp.alpha) - log_det_half - 0.5 * n * (2.0 * PI).ln()
}

/// Best fit ratio in percent.
pub fn bfr(targets: &[f64], predictions: &[f64]) -> Result<f64, GpError> {
    if targets.len() < 2 || targets.len() != predictions.len() {
        return Err(GpError::InvalidInput(format!(
            "bfr needs >= 2 matching samples, got {} and {}",
            targets.len(),
            predictions.len()
        )));
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let den = targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(GpError::DegenerateTargets);
    }
    let num = targets.iter().zip(predictions).map(|(t, p)| (t - p) * (t - p)).sum::<f64>().sqrt();
    Ok(100.0 * (1.0 - num / den).max(0.0))
}

/// Nelder–Mead minimization of `f` from `x0` with initial simplex edge
/// `step`. Returns the best point and value after at most `max_evals`
/// function evaluations.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], step: f64, max_evals: usize, ftol: f64) -> (Vec<f64>, f64) {
    let n = x0.len();
    let eval = |f: &mut F, x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(&mut f, x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step;
        let v = eval(&mut f, &x);
        simplex.push((x, v));
    }
    let mut evals = n + 1;
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[n].1);
        if (worst - best).abs() <= ftol * (1.0 + best.abs()) {
            break;
        }
        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / n as f64;
            }
        }
        let along = |t: f64, worst: &[f64]| -> Vec<f64> {
            centroid.iter().zip(worst).map(|(c, w)| c + t * (w - c)).collect()
        };
        let xr = along(-alpha, &simplex[n].0);
        let fr = eval(&mut f, &xr);
        evals += 1;
        if fr < simplex[0].1 {
            let xe = along(-gamma, &simplex[n].0);
            let fe = eval(&mut f, &xe);
            evals += 1;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = along(-rho, &simplex[n].0);
                (xc.clone(), eval(&mut f, &xc))
            } else {
                let xc = along(rho, &simplex[n].0);
                (xc.clone(), eval(&mut f, &xc))
            };
            evals += 1;
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let x0 = simplex[0].0.clone();
                for (x, v) in simplex.iter_mut().skip(1) {
                    for (xi, bi) in x.iter_mut().zip(&x0) {
                        *xi = bi + sigma * (*xi - bi);
                    }
                    *v = eval(&mut f, x);
                }
                evals += n;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, v) = simplex.swap_remove(0);
    (x, v)
}

/// Search budget of [`tune_hyperparams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneBudget {
    pub restarts: usize,
    pub evals_per_restart: usize,
    /// Training subset size used for the search; the final fit uses all
    /// points.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for TuneBudget {
    fn default() -> Self {
        Self { restarts: 4, evals_per_restart: 400, max_points: 200, seed: 7 }
    }
}

fn lml_of(inputs: &[Vector2<f64>], targets: &[f64], p: KernelParams) -> f64 {
    gp_fit(inputs, targets, p).map(|gp| log_marginal_likelihood(&gp)).unwrap_or(f64::NEG_INFINITY)
}

/// Log-space box for the tuned parameters, scaled to the data.
///
/// Length scales below the typical sample spacing turn the kernel into white
/// noise, which the likelihood cannot tell apart from observation noise;
/// length scales far beyond the input span and vanishing noise make the Gram
/// matrix numerically singular.
fn search_box(inputs: &[Vector2<f64>], targets: &[f64], period: f64) -> [(f64, f64); 6] {
    let scale = {
        let m = targets.iter().map(|y| y * y).sum::<f64>() / targets.len().max(1) as f64;
        if m > 0.0 { m } else { 1e-24 }
    };
    let span = (0..2)
        .map(|v| {
            let (lo, hi) = inputs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), w| (lo.min(w[v]), hi.max(w[v])));
            hi - lo
        })
        .fold(0.0, f64::max);
    let span = if span > 0.0 { span } else { period };
    let mut nn: Vec<f64> = inputs
        .iter()
        .enumerate()
        .map(|(i, a)| {
            inputs
                .iter()
                .enumerate()
                .filter(|(j, b)| *j != i && *b != a)
                .map(|(_, b)| (a - b).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .filter(|d| d.is_finite())
        .collect();
    nn.sort_by(f64::total_cmp);
    let spacing = nn.get(nn.len() / 2).copied().unwrap_or(span / 10.0).min(span);
    let rbf = ((spacing * spacing).ln(), (100.0 * span * span).ln());
    // the periodic term behaves like an RBF of length p·√l/(π√2) at short range
    let per_lo = 2.0 * (PI * spacing / period).powi(2);
    let per = (per_lo.ln(), per_lo.max(1e4).ln());
    [
        ((1e-6 * scale).ln(), (1e3 * scale).ln()),
        rbf,
        rbf,
        per,
        per,
        ((1e-10 * scale).ln(), (10.0 * scale).ln()),
    ]
}

/// Maximizes the log marginal likelihood over the six log-parameters with a
/// multi-start simplex search inside a data-scaled box. Never returns
/// parameters whose likelihood on the search subset is below that of
/// `initial`.
pub fn tune_hyperparams(
    inputs: &[Vector2<f64>],
    targets: &[f64],
    initial: KernelParams,
    budget: &TuneBudget,
) -> Result<KernelParams, GpError> {
    initial.validate()?;
    if budget.restarts == 0 {
        return Err(GpError::InvalidInput("tuning needs at least one restart".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let (w, y): (Vec<_>, Vec<_>) = if inputs.len() > budget.max_points {
        let mut idx: Vec<usize> = (0..inputs.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(budget.max_points);
        idx.sort_unstable();
        idx.iter().map(|&i| (inputs[i], targets[i])).unzip()
    } else {
        (inputs.to_vec(), targets.to_vec())
    };
    let period = initial.period;
    let bounds = search_box(&w, &y, period);
    let clamp = |x: &[f64]| -> Vec<f64> { x.iter().zip(&bounds).map(|(v, (lo, hi))| v.clamp(*lo, *hi)).collect() };
    let neg_lml = |x: &[f64]| -lml_of(&w, &y, KernelParams::from_log(x, period));
    let bounded = |x: &[f64]| {
        if x.iter().zip(&bounds).any(|(v, (lo, hi))| v < lo || v > hi) {
            return f64::INFINITY;
        }
        neg_lml(x)
    };
    let x0 = initial.to_log();
    let mut best = (x0.to_vec(), neg_lml(&x0));
    let start0 = clamp(&x0);
    for r in 0..budget.restarts {
        let start: Vec<f64> = if r == 0 {
            start0.clone()
        } else {
            clamp(&start0.iter().map(|v| v + rng.random_range(-2.0..2.0)).collect::<Vec<_>>())
        };
        let (x, v) = nelder_mead(bounded, &start, 1.0, budget.evals_per_restart, 1e-10);
        if v < best.1 {
            best = (x, v);
        }
    }
    Ok(KernelParams::from_log(&best.0, period))
}

/// Independent GPs for the x and y frame corrections.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub axes: [AxisGp; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AxisFile {
    params: KernelParams,
    targets_m: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    inputs_m: Vec<[f64; 2]>,
    axes: [AxisFile; 2],
}

impl GpModel {
    pub fn fit(inputs: &[Vector2<f64>], targets: [&[f64]; 2], params: [KernelParams; 2]) -> Result<Self, GpError> {
        Ok(Self { axes: [gp_fit(inputs, targets[0], params[0])?, gp_fit(inputs, targets[1], params[1])?] })
    }

    /// Fits both axes to the valid records of a dataset.
    pub fn fit_dataset(ds: &EtaDataset, params: [KernelParams; 2]) -> Result<Self, GpError> {
        let (w, tx, ty) = dataset_arrays(ds);
        if w.len() < 2 {
            return Err(GpError::InvalidInput(format!("need at least 2 valid points, got {}", w.len())));
        }
        Self::fit(&w, [&tx, &ty], params)
    }

    pub fn predict(&self, w: Vector2<f64>) -> [(f64, f64); 2] {
        [gp_predict(&self.axes[0], w), gp_predict(&self.axes[1], w)]
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            version: MODEL_VERSION,
            inputs_m: self.axes[0].inputs.iter().map(|w| [w.x, w.y]).collect(),
            axes: [0, 1].map(|j| AxisFile {
                params: self.axes[j].params,
                targets_m: self.axes[j].targets.iter().cloned().collect(),
            }),
        };
        serde_json::to_string_pretty(&file).expect("serializable")
    }

    /// Loads a model file and refactorizes.
    pub fn from_json(text: &str) -> Result<Self, GpError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| GpError::Format(e.to_string()))?;
        if file.version != MODEL_VERSION {
            return Err(GpError::Format(format!(
                "unsupported model version {} (expected {MODEL_VERSION})",
                file.version
            )));
        }
        let w: Vec<Vector2<f64>> = file.inputs_m.iter().map(|p| Vector2::from(*p)).collect();
        Self::fit(&w, [&file.axes[0].targets_m, &file.axes[1].targets_m], [file.axes[0].params, file.axes[1].params])
    }
}

/// Frame feedforward: posterior means at the reference position.
pub fn feedforward_eval(model: &GpModel, r: Vector2<f64>) -> Vector2<f64> {
    Vector2::new(model.axes[0].predict_mean(r), model.axes[1].predict_mean(r))
}

impl FrameFeedforward for GpModel {
    fn eta_ff(&self, r: Vector2<f64>) -> Vector2<f64> {
        feedforward_eval(self, r)
    }
}

/// Positions and per-axis targets of the valid dataset records.
pub fn dataset_arrays(ds: &EtaDataset) -> (Vec<Vector2<f64>>, Vec<f64>, Vec<f64>) {
    let mut w = Vec::new();
    let mut tx = Vec::new();
    let mut ty = Vec::new();
    for r in ds.valid() {
        w.push(r.position());
        tx.push(r.eta_x_m);
        ty.push(r.eta_y_m);
    }
    (w, tx, ty)
}

/// Training and validation BFR per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfrReport {
    pub training: [f64; 2],
    pub validation: Option<[f64; 2]>,
}

impl BfrReport {
    /// Plain-text table with one row per axis and one column per dataset.
    pub fn table(&self) -> String {
        let mut s = format!("{:<12} | {:>17} | {:>19}\n", "", "Training data set", "Validation data set");
        s.push_str(&format!("{:-<12}-+-{:-<17}-+-{:-<19}\n", "", "", ""));
        for (j, name) in ["x", "y"].iter().enumerate() {
            let val = match self.validation {
                Some(v) => format!("{:.2}", v[j]),
                None => "n/a".to_string(),
            };
            s.push_str(&format!("BFR d{name} [%]   | {:>17.2} | {:>19}\n", self.training[j], val));
        }
        s
    }
}

fn axis_bfr(model: &GpModel, w: &[Vector2<f64>], t: [&[f64]; 2]) -> Result<[f64; 2], GpError> {
    let mut out = [0.0; 2];
    for j in 0..2 {
        let pred: Vec<f64> = w.iter().map(|p| model.axes[j].predict_mean(*p)).collect();
        out[j] = bfr(t[j], &pred)?;
    }
    Ok(out)
}

/// Tunes and fits both axes on `train`, reporting BFR on `train` and, when
/// given, on `validation`.
pub fn fit_and_validate(
    train: &EtaDataset,
    validation: Option<&EtaDataset>,
    period: f64,
    budget: &TuneBudget,
) -> Result<(GpModel, BfrReport), GpError> {
    let (w, tx, ty) = dataset_arrays(train);
    if w.len() < 2 {
        return Err(GpError::InvalidInput(format!("need at least 2 valid training points, got {}", w.len())));
    }
    let mut params = [KernelParams::initial_guess(0.0, period); 2];
    for (j, t) in [&tx, &ty].into_iter().enumerate() {
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        let var = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.len() as f64;
        let scale = var + mean * mean;
        params[j] = tune_hyperparams(&w, t, KernelParams::initial_guess(scale, period), budget)?;
    }
    let model = GpModel::fit(&w, [&tx, &ty], params)?;
    let training = axis_bfr(&model, &w, [&tx, &ty])?;
    let validation = match validation {
        Some(v) => {
            let (wv, vx, vy) = dataset_arrays(v);
            Some(axis_bfr(&model, &wv, [&vx, &vy])?)
        }
        None => None,
    };
    Ok((model, BfrReport { training, validation }))
}

/// Splits a dataset into a training part holding `fraction` of the records
/// and the remainder, with a seeded shuffle.
pub fn split_dataset(ds: &EtaDataset, fraction: f64, seed: u64) -> (EtaDataset, EtaDataset) {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ds.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let (a, b) = idx.split_at(n_train);
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        EtaDataset { records: ix.iter().map(|&i| ds.records[i]).collect() }
    };
    (pick(a), pick(b))
}
