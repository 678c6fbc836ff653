mod common;

use commutation_core::plant::{apply_wrench, coupling_matrix, delta_field, Harmonic, Bump};
use commutation_core::sim::{measure_steady_state_force, run_scenario, Mode, ScenarioConfig, SystemConfig};
use commutation_core::{MismatchField, PlantParams, PlantState, Vector2, Vector3, Workspace};
use proptest::prelude::*;

const TAU: f64 = 0.04;

fn field_strategy() -> impl Strategy<Value = MismatchField> {
    let amp = 2e-5;
    (
        prop::array::uniform2(-amp..amp),
        prop::collection::vec(
            (prop::array::uniform2(-amp..amp), 0.005..0.08f64, prop::array::uniform2(0.0..6.3f64)),
            0..3,
        ),
        prop::collection::vec(
            (prop::array::uniform2(-0.1..0.1f64), 0.01..0.1f64, prop::array::uniform2(-amp..amp)),
            0..3,
        ),
    )
        .prop_map(|(offset, hs, bs)| {
            let harmonics = hs
                .into_iter()
                .map(|(a, p, ph)| Harmonic { amplitude_m: a, pitch_m: p, phase_rad: ph })
                .collect();
            let bumps = bs
                .into_iter()
                .map(|(c, w, h)| Bump { center_m: c, width_m: w, height_m: h })
                .collect();
            MismatchField::new(offset, harmonics, bumps, TAU).unwrap()
        })
}

proptest! {
    #[test]
    fn exact_frame_gives_identity(field in field_strategy(),
                                  q in prop::array::uniform2(-0.1..0.1f64),
                                  f in prop::array::uniform3(-200.0..200.0f64)) {
        let p = PlantParams::default();
        let state = PlantState::at_rest(Vector3::new(q[0], q[1], 0.0));
        let eta = delta_field(&field, Vector2::from(q));
        let f_ref = Vector3::from(f);
        let f_m = apply_wrench(&state, f_ref, &field, eta, &p);
        prop_assert!((f_m - f_ref).amax() <= 1e-12 * f_ref.amax());
    }

    #[test]
    fn coupling_norm_bounded(ex in -TAU / 4.0..TAU / 4.0, ey in -TAU / 4.0..TAU / 4.0, kappa in 0.0..2.0f64) {
        let c = coupling_matrix(Vector2::new(ex, ey), TAU, kappa);
        let bound = (1.0 + kappa * kappa).sqrt() * 2f64.sqrt();
        prop_assert!(c.singular_values().max() <= bound + 1e-12);
    }

    #[test]
    fn coupling_is_continuous(ex in -TAU / 4.0..TAU / 4.0, ey in -TAU / 4.0..TAU / 4.0) {
        let e = Vector2::new(ex, ey);
        let h = 1e-9;
        let d = coupling_matrix(e + Vector2::new(h, h), TAU, 1.0) - coupling_matrix(e, TAU, 1.0);
        // Lipschitz constant of every entry is at most 2π/τ.
        prop_assert!(d.amax() <= 2.0 * std::f64::consts::PI / TAU * 2.0 * h);
    }

    #[test]
    fn field_sup_below_quarter_pitch_on_grid(field in field_strategy()) {
        let ws = Workspace::default();
        let mut sup: f64 = 0.0;
        for q in ws.grid(100, 100) {
            sup = sup.max(delta_field(&field, q).amax());
        }
        prop_assert!(sup < TAU / 4.0);
        prop_assert!(sup <= field.sup_bound() + 1e-18);
    }

    #[test]
    fn field_toml_round_trip(field in field_strategy()) {
        let text = toml::to_string(&field).unwrap();
        let back: MismatchField = toml::from_str(&text).unwrap();
        let q = Vector2::new(0.013, -0.07);
        prop_assert_eq!(delta_field(&back, q), delta_field(&field, q));
    }
}

#[test]
fn randomized_fields_respect_sup_bound() {
    let ws = Workspace::default();
    for seed in 0..20 {
        let field = MismatchField::randomized(seed, TAU, &ws);
        field.validate(TAU).unwrap();
        let sup = ws.grid(100, 100).into_iter().map(|q| delta_field(&field, q).amax()).fold(0.0, f64::max);
        assert!(sup < TAU / 4.0, "seed {seed}: {sup}");
    }
}

#[test]
fn steady_force_is_monotone_in_eta() {
    let delta = [3e-5, 0.0];
    let sys = SystemConfig::with_field(MismatchField::constant(delta));
    let q = Vector2::new(0.02, -0.01);
    let forces: Vec<f64> = (-2..=2)
        .map(|i| {
            let eta = Vector2::new(delta[0] + i as f64 * TAU / 20.0, 0.0);
            measure_steady_state_force(&sys, q, eta, sys.default_settle_time(), sys.default_average_time()).unwrap().x
        })
        .collect();
    let diffs: Vec<f64> = forces.windows(2).map(|w| w[1] - w[0]).collect();
    assert!(diffs.iter().all(|d| *d > 0.0) || diffs.iter().all(|d| *d < 0.0), "{forces:?}");
}

#[test]
fn logged_run_replays_bit_identically() {
    let ws = Workspace::default();
    let mut sys = SystemConfig::with_field(MismatchField::randomized(11, TAU, &ws));
    sys.noise_std_m = 1e-9;
    let mut cfg = ScenarioConfig::new(sys.clone(), Mode::Baseline);
    cfg.pre_hold_s = 0.05;
    cfg.duration_s = 0.3;
    let log = run_scenario(&cfg, None).unwrap();
    let p = sys.plant;
    for rec in &log.records {
        let state = PlantState::at_rest(Vector3::from(rec.q));
        let f_ref = Vector3::from(rec.f_c) + Vector3::from(rec.f_ff);
        let eta = Vector2::from(rec.eta_fb) + Vector2::from(rec.eta_ff);
        let f_m = apply_wrench(&state, f_ref, &sys.field, eta, &p);
        assert_eq!(f_m, Vector3::from(rec.f_m), "t = {}", rec.t);
    }
}
