//! Reference implementations used as independent test oracles.
#![allow(dead_code)]

use commutation_core::plant::{coupling_matrix, delta_field, MismatchField, PlantParams};
use commutation_core::sim::SimError;
use commutation_core::calibrate::ForceProbe;
use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};

/// Steady-state feedback force of a levitated mass with frame error `e`:
/// the applied wrench must cancel gravity, so `C(e)·(F_c + m g ẑ) = m g ẑ`
/// is solved directly with a 3×3 LU.
pub fn static_force(e: Vector2<f64>, p: &PlantParams) -> Vector3<f64> {
    let c: Matrix3<f64> = coupling_matrix(e, p.coil_pitch, p.cross_coupling);
    let w = Vector3::new(0.0, 0.0, p.mass * p.gravity);
    c.lu().solve(&w).expect("coupling matrix invertible in the monotone regime") - w
}

/// Force probe built on the static force balance; no simulation involved.
pub struct StaticProbe {
    pub field: MismatchField,
    pub plant: PlantParams,
}

impl ForceProbe for StaticProbe {
    fn measure(&self, q: Vector2<f64>, eta: Vector2<f64>) -> Result<Vector3<f64>, SimError> {
        Ok(static_force(delta_field(&self.field, q) - eta, &self.plant))
    }
}

/// Dense GP posterior via an explicit inverse and determinant.
pub struct DenseGp {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub lml: f64,
}

pub fn dense_gp(
    k: impl Fn(Vector2<f64>, Vector2<f64>) -> f64,
    w: &[Vector2<f64>],
    y: &[f64],
    noise: f64,
    queries: &[Vector2<f64>],
) -> DenseGp {
    let n = w.len();
    let mut kk = DMatrix::from_fn(n, n, |i, j| k(w[i], w[j]));
    for i in 0..n {
        kk[(i, i)] += noise;
    }
    let inv = kk.clone().try_inverse().expect("invertible");
    let yv = DVector::from_column_slice(y);
    let alpha = &inv * &yv;
    let mut mean = Vec::new();
    let mut var = Vec::new();
    for q in queries {
        let ks = DVector::from_fn(n, |i, _| k(w[i], *q));
        mean.push(ks.dot(&alpha));
        var.push(k(*q, *q) - (ks.transpose() * &inv * &ks)[(0, 0)]);
    }
    let lml = -0.5 * yv.dot(&alpha) - 0.5 * kk.determinant().ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    DenseGp { mean, var, lml }
}

/// Direct windowed mean with explicit index loops.
pub fn brute_ma(e: &[f64], w: usize) -> Vec<f64> {
    let h = w / 2;
    (h..e.len() - h).map(|i| (i - h..=i + h).map(|j| e[j]).sum::<f64>() / w as f64).collect()
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
