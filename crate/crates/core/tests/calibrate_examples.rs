mod common;

use common::StaticProbe;
use commutation_core::calibrate::{estimate_gradient, objective, ForceProbe};
use commutation_core::plant::delta_field;
use commutation_core::sim::SteadyStateProbe;
use commutation_core::{gd_calibrate, CalibrationError, Config, GdConfig, GdTrace, MismatchField, PlantParams, SystemConfig, Vector2};
use proptest::prelude::*;

const TAU: f64 = 0.04;

fn static_probe(field: MismatchField) -> StaticProbe {
    StaticProbe { field, plant: PlantParams::default() }
}

fn assert_monotone(trace: &GdTrace) {
    for w in trace.iterations.windows(2) {
        if w[0].accepted {
            assert!(w[1].objective <= w[0].objective, "J rose after accepted step {}: {} -> {}", w[0].k, w[0].objective, w[1].objective);
        }
    }
    if let Some(last) = trace.iterations.last() {
        assert!(trace.final_objective <= last.objective);
    }
}

#[test]
fn objective_sweep_matches_static_oracle() {
    let sys = Config::default().system();
    let cfg = GdConfig::for_system(&sys);
    let probe = SteadyStateProbe::new(&sys);
    let oracle = static_probe(sys.field.clone());
    for i in -2..=2 {
        let eta = Vector2::new(i as f64 * 2e-5, -(i as f64) * 1e-5);
        let (j_sim, _) = objective(eta, &cfg, &probe).unwrap();
        let (j_ref, _) = objective(eta, &cfg, &oracle).unwrap();
        assert!(common::rel_close(j_sim, j_ref, 1e-6), "η = {eta}: {j_sim} vs {j_ref}");
    }
    assert_eq!(probe.count(), 5 * cfg.n_p());
}

#[test]
fn zero_field_objective_vanishes() {
    let sys = SystemConfig::with_field(MismatchField::zero());
    let cfg = GdConfig::for_system(&sys);
    let (j, _) = objective(Vector2::zeros(), &cfg, &SteadyStateProbe::new(&sys)).unwrap();
    assert!(j < 1e-6, "{j}");
}

#[test]
fn true_offset_beats_zero() {
    for d in [[3e-5, -2e-5], [-1e-3, 0.0], [4e-3, 2e-3]] {
        let sys = SystemConfig::with_field(MismatchField::constant(d));
        let cfg = GdConfig::for_system(&sys);
        let probe = SteadyStateProbe::new(&sys);
        let (at_delta, _) = objective(Vector2::from(d), &cfg, &probe).unwrap();
        let (at_zero, _) = objective(Vector2::zeros(), &cfg, &probe).unwrap();
        assert!(at_delta < at_zero, "{d:?}: {at_delta} vs {at_zero}");
    }
}

/// At the optimum the per-position objective is a cone: the one-sided
/// quotient equals the cone slope while the central quotient is flat.
#[test]
fn gradient_at_optimum_is_a_cone() {
    let d = Vector2::new(3e-5, -2e-5);
    let sys = SystemConfig::with_field(MismatchField::constant(d.into()));
    let probe = SteadyStateProbe::new(&sys);
    let s_eta = sys.plant.nominal_eta_sensitivity();
    let positions = [[0.05, -0.02], [-0.07, 0.03], [0.0, 0.0]];
    let xi = 1e-6;
    let g = estimate_gradient(d, &positions, [xi, xi], sys.commutation.limit, &probe).unwrap();
    assert_eq!(g.measurements, positions.len() * 3);
    for (i, gi) in g.per_position.iter().enumerate() {
        for j in 0..2 {
            assert!(common::rel_close(gi[j], s_eta, 1e-3), "position {i} axis {j}: {} vs {s_eta}", gi[j]);
        }
        for j in 0..2 {
            let q = Vector2::from(positions[i]);
            let step = Vector2::ith(j, xi);
            let plus = probe.measure(q, d + step).unwrap().norm();
            let minus = probe.measure(q, d - step).unwrap().norm();
            let central = (plus - minus) / (2.0 * xi);
            assert!(central.abs() < 1e-3 * s_eta, "central quotient {central}");
        }
    }
}

#[test]
fn converges_on_small_constant_offset() {
    let d = Vector2::new(3e-5, -2e-5);
    let sys = SystemConfig::with_field(MismatchField::constant(d.into()));
    let cfg = GdConfig::for_system(&sys);
    let probe = SteadyStateProbe::new(&sys);
    let (eta, trace) = gd_calibrate(&cfg, sys.commutation.limit, &probe).unwrap();
    assert!(trace.iterations.len() <= 50);
    assert!((eta - d).norm() < 0.02 * d.norm(), "{eta} vs {d}");
    assert_monotone(&trace);
    let mut issued = 0;
    for row in &trace.iterations {
        assert_eq!(row.gradient_measurements, cfg.n_p() * 3);
        assert_eq!(row.line_search_measurements % cfg.n_p(), 0);
        issued += row.gradient_measurements + row.line_search_measurements;
    }
    assert_eq!(issued, probe.count());
}

#[test]
fn zero_field_stops_immediately() {
    let sys = SystemConfig::with_field(MismatchField::zero());
    let cfg = GdConfig::for_system(&sys);
    let probe = SteadyStateProbe::new(&sys);
    let (eta, trace) = gd_calibrate(&cfg, sys.commutation.limit, &probe).unwrap();
    assert_eq!(eta, Vector2::zeros());
    assert_eq!(trace.iterations.len(), 1);
    assert!(trace.converged);
    assert_eq!(probe.count(), cfg.n_p() * 3);
}

#[test]
fn varying_field_matches_lattice_minimizer() {
    let cfg_file = Config::default();
    let sys = cfg_file.system();
    let cfg = GdConfig::for_system(&sys);
    let probe = static_probe(sys.field.clone());
    let deltas: Vec<Vector2<f64>> = cfg.positions.iter().map(|p| delta_field(&sys.field, Vector2::from(*p))).collect();
    let lo = deltas.iter().fold(Vector2::repeat(f64::INFINITY), |a, d| a.inf(d));
    let hi = deltas.iter().fold(Vector2::repeat(f64::NEG_INFINITY), |a, d| a.sup(d));
    let n = 41;
    let spacing = (hi - lo) / (n - 1) as f64;
    let mut best = (f64::INFINITY, Vector2::zeros());
    for ix in 0..n {
        for iy in 0..n {
            let eta = lo + Vector2::new(ix as f64 * spacing.x, iy as f64 * spacing.y);
            let (j, _) = objective(eta, &cfg, &probe).unwrap();
            if j < best.0 {
                best = (j, eta);
            }
        }
    }
    let (eta, trace) = gd_calibrate(&cfg, sys.commutation.limit, &probe).unwrap();
    assert_monotone(&trace);
    assert!(trace.final_objective <= best.0 * (1.0 + 1e-9), "GD {} vs lattice {}", trace.final_objective, best.0);
    let err = eta - best.1;
    assert!(err.x.abs() < spacing.x && err.y.abs() < spacing.y, "GD {eta} vs lattice {} (spacing {spacing})", best.1);
}

#[test]
fn flat_objective_reports_no_descent() {
    // a constant force never decreases J, so no step can be accepted
    struct Flat;
    impl ForceProbe for Flat {
        fn measure(&self, _q: Vector2<f64>, _eta: Vector2<f64>) -> Result<commutation_core::Vector3<f64>, commutation_core::sim::SimError> {
            Ok(commutation_core::Vector3::new(1.0, 0.0, 0.0))
        }
    }
    let sys = SystemConfig::with_field(MismatchField::zero());
    let mut cfg = GdConfig::for_system(&sys);
    cfg.max_iterations = 3;
    match gd_calibrate(&cfg, TAU / 4.0, &Flat) {
        Err(CalibrationError::NoDescent { trace, .. }) => assert!(trace.iterations.iter().all(|r| !r.accepted)),
        other => panic!("expected NoDescent, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn constant_offsets_converge(dx in -TAU / 8.0..TAU / 8.0, dy in -TAU / 8.0..TAU / 8.0) {
        let field = MismatchField::constant([dx, dy]);
        let sys = SystemConfig::with_field(field.clone());
        let cfg = GdConfig::for_system(&sys);
        let (eta, trace) = gd_calibrate(&cfg, sys.commutation.limit, &static_probe(field)).unwrap();
        prop_assert!(trace.iterations.len() <= cfg.max_iterations);
        prop_assert!((eta - Vector2::new(dx, dy)).amax() < TAU / 500.0, "{} vs ({dx}, {dy})", eta);
    }
}
