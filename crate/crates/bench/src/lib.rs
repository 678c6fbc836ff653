//! Fixtures shared by the benchmarks.

use commutation_core::gpff::{GpModel, KernelParams};
use commutation_core::plant::delta_field;
use commutation_core::{Config, SystemConfig, Vector2};

/// System built from the default configuration (randomized field).
pub fn default_system() -> SystemConfig {
    Config::default().system()
}

/// Noise-free field samples on an `n × n` grid, fitted with fixed kernel
/// parameters so benchmarks skip the tuning step.
pub fn field_model(sys: &SystemConfig, n: usize) -> (Vec<Vector2<f64>>, GpModel) {
    let w = sys.workspace.grid(n, n);
    let tx: Vec<f64> = w.iter().map(|q| delta_field(&sys.field, *q).x).collect();
    let ty: Vec<f64> = w.iter().map(|q| delta_field(&sys.field, *q).y).collect();
    let p = KernelParams {
        signal_var: 4e-10,
        rbf_len2: [0.015, 0.015],
        periodic_len2: [5.0, 5.0],
        noise_var: 1e-16,
        period: sys.plant.coil_pitch,
    };
    let model = GpModel::fit(&w, [&tx, &ty], [p, p]).expect("fixed parameters factorize");
    (w, model)
}
