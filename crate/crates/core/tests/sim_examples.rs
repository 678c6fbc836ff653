mod common;

use commutation_core::gpff::fit_and_validate;
use commutation_core::metrics::peak_ma_error;
use commutation_core::plant::delta_field;
use commutation_core::sim::{
    collect_eta_grid, measure_steady_state_force, run_scenario, ClosedLoop, SimError, SimLog,
};
use commutation_core::{Config, MaConfig, MismatchField, Mode, ScenarioConfig, SystemConfig, Vector2, Vector3};

const TAU: f64 = 0.04;

fn cruise_peak(log: &SimLog) -> f64 {
    let (t1, t2) = log.header.cruise_window;
    let axis = log.header.scan_axis.index();
    log.records
        .iter()
        .filter(|r| r.t >= t1 && r.t <= t2)
        .map(|r| r.e_pos[axis].abs().max(r.e_pos[1 - axis].abs()))
        .fold(0.0, f64::max)
}

fn max_abs_error(log: &SimLog) -> f64 {
    log.records.iter().map(|r| Vector3::from(r.e_pos).amax()).fold(0.0, f64::max)
}

#[test]
fn zero_field_baseline_tracks_to_discretization_residual() {
    let cfg = ScenarioConfig::new(SystemConfig::with_field(MismatchField::zero()), Mode::Baseline);
    let log = run_scenario(&cfg, None).unwrap();
    assert_eq!(log.records.len(), (cfg.duration_s / cfg.system.plant.dt).round() as usize);
    let peak = cruise_peak(&log);
    assert!(peak < 1e-9, "peak cruise error {peak}");
}

#[test]
fn exact_static_frame_matches_perfect_model() {
    let delta = [2e-3, -1.5e-3];
    let mut cfg = ScenarioConfig::new(SystemConfig::with_field(MismatchField::constant(delta)), Mode::StaticCalibrated);
    cfg.static_eta_m = Some(delta);
    let log = run_scenario(&cfg, None).unwrap();
    assert!(cruise_peak(&log) < 1e-9, "{}", cruise_peak(&log));
    assert!(log.records.iter().all(|r| r.eta_fb == delta));
}

#[test]
fn noisy_exact_frame_stays_near_noise_floor() {
    let delta = [2e-3, -1.5e-3];
    let mut sys = SystemConfig::with_field(MismatchField::constant(delta));
    sys.noise_std_m = 1e-9;
    let mut cfg = ScenarioConfig::new(sys, Mode::StaticCalibrated);
    cfg.static_eta_m = Some(delta);
    let log = run_scenario(&cfg, None).unwrap();
    let peak = peak_ma_error(&log, 1, &MaConfig::for_log(&log)).unwrap();
    assert!(peak < 10.0 * 1e-9, "MA peak {peak}");
}

#[test]
fn runs_are_bit_identical() {
    let mut sys = Config::default().system();
    sys.noise_std_m = 5e-10;
    let mut cfg = ScenarioConfig::new(sys, Mode::Dynamic);
    cfg.duration_s = 0.5;
    let write = |log: &SimLog| {
        let mut buf = Vec::new();
        log.write_csv(&mut buf, None).unwrap();
        buf
    };
    let a = write(&run_scenario(&cfg, None).unwrap());
    let b = write(&run_scenario(&cfg, None).unwrap());
    assert_eq!(a, b);
    let back = SimLog::read_csv(std::io::Cursor::new(&a)).unwrap();
    assert_eq!(write(&back), a);
}

#[test]
fn steady_force_matches_static_balance() {
    let sys = SystemConfig::with_field(MismatchField::constant([3e-5, 0.0]));
    let q = Vector2::new(0.01, 0.03);
    let f = measure_steady_state_force(&sys, q, Vector2::zeros(), sys.default_settle_time(), sys.default_average_time()).unwrap();
    let want = common::static_force(Vector2::new(3e-5, 0.0), &sys.plant);
    assert!((f - want).amax() < 1e-6 * want.amax(), "{f} vs {want}");
    // small-angle form: F_x ≈ −κ·tan(kΔ)·m·g
    let k = 2.0 * std::f64::consts::PI / TAU;
    let approx = -(k * 3e-5).tan() * sys.plant.mass * sys.plant.gravity;
    assert!(common::rel_close(f.x, approx, 1e-3), "{} vs {approx}", f.x);
}

#[test]
fn steady_force_vanishes_at_exact_frame() {
    let d = [3e-5, -2e-5];
    let sys = SystemConfig::with_field(MismatchField::constant(d));
    let f = measure_steady_state_force(&sys, Vector2::new(-0.04, 0.07), Vector2::from(d), sys.default_settle_time(), sys.default_average_time()).unwrap();
    assert!(f.amax() < 1e-6, "{f}");
}

#[test]
fn regulator_settles_within_five_bandwidth_periods() {
    let d = Vector2::new(3e-5, -2e-5);
    let sys = SystemConfig::with_field(MismatchField::constant(d.into()));
    let r = Vector3::new(0.02, 0.01, 0.0);
    let mut cl = ClosedLoop::new(&sys, r, Vector2::zeros(), true, 1);
    let n = (5.0 / sys.commutation_bandwidth() / sys.plant.dt).round() as usize;
    let mut eta = Vector2::zeros();
    for _ in 0..n {
        eta = cl.step(r, Vector3::zeros(), Vector2::zeros()).eta_fb;
    }
    assert!((eta - d).amax() < 0.05 * d.amax(), "{eta} vs {d}");
}

#[test]
fn constant_field_collection_recovers_constant() {
    let d = Vector2::new(4e-3, -2.5e-3);
    let sys = SystemConfig::with_field(MismatchField::constant(d.into()));
    let ds = collect_eta_grid(&sys, &sys.workspace.grid(4, 4), sys.default_hold_time(), Vector2::zeros(), None).unwrap();
    assert_eq!(ds.len(), 16);
    for r in &ds.records {
        assert!(r.valid);
        assert!((r.eta() - d).amax() < 0.01 * d.amax(), "{:?}", r);
    }
}

#[test]
fn collected_eta_matches_ground_truth_and_ignores_order() {
    let sys = Config::default().system();
    let grid = sys.workspace.random_points(12, 3);
    let ds = collect_eta_grid(&sys, &grid, sys.default_hold_time(), Vector2::zeros(), Some(1)).unwrap();
    let bound = grid.iter().map(|q| delta_field(&sys.field, *q).amax()).fold(0.0, f64::max);
    for r in &ds.records {
        let err = (r.eta() - delta_field(&sys.field, r.position())).amax();
        assert!(err < 0.05 * bound, "point {}: {err}", r.index);
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.reverse();
    order.swap(2, 7);
    let shuffled: Vec<_> = order.iter().map(|&i| grid[i]).collect();
    let ds2 = collect_eta_grid(&sys, &shuffled, sys.default_hold_time(), Vector2::zeros(), None).unwrap();
    for (k, &i) in order.iter().enumerate() {
        let a = ds.records[i].eta();
        let b = ds2.records[k].eta();
        assert!((a - b).amax() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn divergence_keeps_partial_log() {
    let mut sys = SystemConfig::with_field(MismatchField::zero());
    sys.noise_std_m = 0.05;
    let cfg = ScenarioConfig::new(sys, Mode::Baseline);
    match run_scenario(&cfg, None) {
        Err(SimError::NumericalDivergence { partial: Some(log), error, .. }) => {
            assert!(error > 0.01);
            assert!(!log.records.is_empty());
            assert_eq!(log.header.samples, log.records.len());
        }
        other => panic!("expected divergence, got {:?}", other.map(|l| l.records.len())),
    }
}

/// Full pipeline on the default field: 576-point collection, GP fit and the
/// four scan scenarios.
#[test]
fn default_field_mode_ordering() {
    let cfg = Config::default();
    let sys = cfg.system();
    let grid = cfg.collect_grid();
    let ds = collect_eta_grid(&sys, &grid, cfg.hold_time(&sys), Vector2::zeros(), None).unwrap();
    assert_eq!(ds.len(), 576);
    assert!(ds.records.iter().all(|r| r.valid));
    let (model, _) = fit_and_validate(&ds, None, cfg.gp_period(), &cfg.tune_budget()).unwrap();

    let sup = sys.field.sup_bound();
    assert!(sup < TAU / 8.0);
    let mut peaks = Vec::new();
    for mode in [Mode::Baseline, Mode::Dynamic, Mode::DynamicFf] {
        let log = run_scenario(&cfg.scenario(mode), Some(&model)).unwrap();
        assert!(max_abs_error(&log) < 1e-3, "{mode}: position loop lost bound");
        let peak = peak_ma_error(&log, 1, &MaConfig::for_log(&log)).unwrap();
        if mode == Mode::DynamicFf {
            let field_inf = grid.iter().map(|q| delta_field(&sys.field, *q).amax()).fold(0.0, f64::max);
            let (t1, t2) = log.header.cruise_window;
            let residual = log
                .records
                .iter()
                .filter(|r| r.t >= t1 && r.t <= t2)
                .map(|r| Vector2::from(r.eta_fb).amax())
                .fold(0.0, f64::max);
            assert!(residual < 0.2 * field_inf, "regulator residual {residual} vs {field_inf}");
        }
        peaks.push(peak);
    }
    let (base, dynamic, ff) = (peaks[0], peaks[1], peaks[2]);
    assert!(dynamic <= 0.95 * base, "dynamic {dynamic} vs baseline {base}");
    assert!(ff <= 0.95 * dynamic, "ff {ff} vs dynamic {dynamic}");
    assert!(ff <= 0.5 * base, "ff {ff} vs baseline {base}");
}
