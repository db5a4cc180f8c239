use legmimic::contact::{linearize_step, step_relaxed};
use legmimic::model::{build_quadruped, ModelSpec, QuadrupedParams, State};
use legmimic::mpc::{
    linearize_reference, mpc_step, run_loop, track_closed_loop, Disturbance, MpcConfig, MpcController, MpcStatus,
    Termination, WarmStart,
};
use legmimic::retarget::{retarget, RetargetConfig};
use legmimic::terrain::TerrainModel;
use legmimic::testkit::{
    finite_difference_jacobian, generate_synthetic_keypoints, standing_reference, Pattern, SyntheticParams,
};
use legmimic::trajopt::{solve_reference, ReferenceTrajectory, TrajOptProblem};
use legmimic::Error;
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quad() -> ModelSpec {
    build_quadruped(&QuadrupedParams::default()).unwrap()
}

fn standing(seconds: f64) -> (ModelSpec, TerrainModel, ReferenceTrajectory) {
    let model = quad();
    let flat = TerrainModel::flat(0.0);
    let r = standing_reference(&model, &flat, 0.05, (seconds / 0.05).round() as usize).unwrap();
    (model, flat, r)
}

fn cpr_reference() -> (ModelSpec, ReferenceTrajectory) {
    let model = quad();
    let params = SyntheticParams { penetration: 0.02, ..Default::default() };
    let track = generate_synthetic_keypoints(Pattern::Cpr, &params, 0).unwrap();
    let r = retarget(&track, &model, &RetargetConfig::default(), 0.05).unwrap();
    let p = TrajOptProblem::new(model.clone(), TerrainModel::step(0.0, 0.1), r.states, 0.05);
    (model, solve_reference(&p).unwrap())
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

fn body_force_z(u: &DVector<f64>) -> f64 {
    (0..4).map(|i| -u[3 * i + 2]).sum()
}

#[test]
fn standing_linearization_is_time_invariant() {
    let (model, flat, r) = standing(1.0);
    let lin = linearize_reference(&model, &flat, &r, 1e-3, 0.05).unwrap();
    assert_eq!(lin.len(), r.steps());
    for l in &lin[1..] {
        assert!(rel_err(&l.a, &lin[0].a) <= 1e-10);
        assert!(rel_err(&l.b, &lin[0].b) <= 1e-10);
        for (c, c0) in l.contacts.iter().zip(&lin[0].contacts) {
            assert!((c.gap - c0.gap).abs() <= 1e-10);
            assert!(c.active);
        }
    }
}

#[test]
fn linearization_matches_finite_differences() {
    let model = quad();
    let flat = TerrainModel::flat(0.0);
    let base = model.nominal_state(Vector3::new(0.0, 0.0, 0.3));
    let u0 = model.gravity_compensation(&[true; 4]);
    let rho = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..50 {
        let mut x = base.clone();
        for i in 0..model.n_q {
            x.q[i] += rng.gen_range(-0.01..0.01);
        }
        for i in 0..model.n_v {
            x.v[i] = rng.gen_range(-0.1..0.1);
        }
        let u = &u0 + DVector::from_fn(12, |_, _| rng.gen_range(-3.0..3.0));
        let lin = linearize_step(&model, &flat, 0.05, &x, &u, rho, 0.05).unwrap();
        let fx = finite_difference_jacobian(
            |xv| {
                let s = State::from_vector(&model, xv).unwrap();
                step_relaxed(&model, &flat, 0.05, &s, &u, rho, None, false).unwrap().next_state.to_vector()
            },
            &x.to_vector(),
            1e-6,
        );
        let fu = finite_difference_jacobian(
            |uv| step_relaxed(&model, &flat, 0.05, &x, uv, rho, None, false).unwrap().next_state.to_vector(),
            &u,
            1e-6,
        );
        assert!(rel_err(&lin.a, &fx) <= 1e-4, "sample {k}: {}", rel_err(&lin.a, &fx));
        assert!(rel_err(&lin.b, &fu) <= 1e-4, "sample {k}: {}", rel_err(&lin.b, &fu));
    }
}

#[test]
fn lcp_step_jacobians_match_finite_differences() {
    let model = quad();
    let flat = TerrainModel::flat(0.0);
    let x0 = model.nominal_state(Vector3::new(0.0, 0.0, 0.3));
    let u0 = model.gravity_compensation(&[true; 4]);
    let lin = linearize_step(&model, &flat, 0.05, &x0, &u0, 1e-3, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let x = x0.to_vector() + DVector::from_fn(36, |_, _| rng.gen_range(-0.005..0.005));
        let u = &u0 + DVector::from_fn(12, |_, _| rng.gen_range(-5.0..5.0));
        let s = lin.step(&model, &x, &u, 1e-3, None, true).unwrap();
        let fx = finite_difference_jacobian(|xv| lin.step(&model, xv, &u, 1e-3, None, false).unwrap().next, &x, 1e-6);
        let fu = finite_difference_jacobian(|uv| lin.step(&model, &x, uv, 1e-3, None, false).unwrap().next, &u, 1e-6);
        assert!(rel_err(&s.dx, &fx) <= 1e-4, "{}", rel_err(&s.dx, &fx));
        assert!(rel_err(&s.du, &fu) <= 1e-4, "{}", rel_err(&s.du, &fu));
    }
}

#[test]
fn flight_phase_has_no_active_contact_rows() {
    let model = quad();
    let flat = TerrainModel::flat(0.0);
    let x = model.nominal_state(Vector3::new(0.0, 0.0, 0.6));
    let lin = linearize_step(&model, &flat, 0.05, &x, &DVector::zeros(12), 1e-3, 0.05).unwrap();
    assert!(lin.contacts.iter().all(|c| !c.active && c.gap > 0.2));
    // Without active rows the step is the affine smooth update.
    let s = lin.step(&model, &x.to_vector(), &DVector::zeros(12), 1e-3, None, false).unwrap();
    assert!(s.forces.iter().all(|f| f.normal == 0.0));
    assert!((s.next.rows(18, 18) - &lin.v_free).amax() < 1e-12);
}

#[test]
fn reference_state_gives_reference_control() {
    let (model, r) = cpr_reference();
    let ctrl = MpcController::new(&model, &TerrainModel::step(0.0, 0.1), &r, &MpcConfig::default()).unwrap();
    // Horizons that reach past the end see the zero-velocity hold target.
    for t in 0..=r.steps() - ctrl.config().horizon {
        let plan = ctrl.solve(&r.states[t], t, WarmStart::Reference).unwrap();
        let u = model.clamp_control(&r.controls[t]);
        assert!((&plan.controls[0] - &u).amax() <= 1e-6, "step {t}: {}", (&plan.controls[0] - &u).amax());
    }
}

#[test]
fn horizon_clamps_and_holds_terminal_stance() {
    let (model, flat, r) = standing(0.5);
    let mut ctrl = MpcController::new(&model, &flat, &r, &MpcConfig::default()).unwrap();
    let n = r.steps();
    for t in [n - 1, n, n + 5] {
        let u = mpc_step(&mut ctrl, &r.states[n], t).unwrap();
        assert!((&u - &r.controls[n - 1]).amax() <= 1e-6);
    }
}

#[test]
fn vertical_offset_is_corrected() {
    let (model, flat, r) = standing(1.0);
    let mut ctrl = MpcController::new(&model, &flat, &r, &MpcConfig::default()).unwrap();
    let mut x0 = r.states[0].clone();
    x0.q[2] += 0.01;
    // Body above the reference: the limbs push the body up less.
    let plan = ctrl.solve(&x0, 0, WarmStart::Reference).unwrap();
    assert!(body_force_z(&plan.controls[0]) < body_force_z(&r.controls[0]));
    let log = run_loop(&model, &flat, &r, &mut ctrl, &x0, &[]).unwrap();
    assert_eq!(log.termination, Termination::Completed);
    for (s, t) in log.states().iter().zip(log.times()) {
        if t >= 0.5 - 1e-9 {
            assert!((s.q[2] - 0.3).abs() < 1e-3, "t {t}: {}", s.q[2]);
        }
    }
}

#[test]
fn standing_closed_loop_is_a_fixed_point() {
    let (model, flat, r) = standing(2.0);
    let log = track_closed_loop(&model, &flat, &flat, &r, &MpcConfig::default(), &[]).unwrap();
    assert_eq!(log.termination, Termination::Completed);
    assert_eq!(log.steps.len(), 40);
    assert!(log.summary.max_state_error <= 1e-4, "{}", log.summary.max_state_error);
    assert!(log.summary.max_body_position_error < 5e-3);
    let no_delay = MpcConfig { latency: false, ..Default::default() };
    let log = track_closed_loop(&model, &flat, &flat, &r, &no_delay, &[]).unwrap();
    assert!(log.summary.max_state_error <= 1e-4);
}

#[test]
fn lateral_impulse_is_rejected() {
    let (model, flat, r) = standing(1.0);
    let cfg = MpcConfig { duration: 2.5, ..Default::default() };
    let kick = Disturbance { time: 0.5, impulse: [0.0, 5.0, 0.0] };
    let log = track_closed_loop(&model, &flat, &flat, &r, &cfg, &[kick]).unwrap();
    assert_eq!(log.termination, Termination::Completed);
    let err: Vec<(f64, f64)> = log
        .states()
        .iter()
        .zip(log.times())
        .map(|(s, t)| (t, (s.body_position() - Vector3::new(0.0, 0.0, 0.3)).norm()))
        .collect();
    assert!(err.iter().any(|(t, e)| *t > 0.5 && *e > 0.01), "impulse had no effect");
    for (t, e) in err {
        if t >= 1.5 - 1e-9 {
            assert!(e < 0.01, "t {t}: {e}");
        }
    }
}

#[test]
fn terrain_mismatch_does_not_diverge() {
    let (model, r) = cpr_reference();
    let planned = TerrainModel::step(0.0, 0.1);
    let actual = TerrainModel::step(0.0, 0.12);
    let log = track_closed_loop(&model, &actual, &planned, &r, &MpcConfig::default(), &[]).unwrap();
    assert_eq!(log.termination, Termination::Completed);
    assert_eq!(log.steps.len(), r.steps());
    assert!(log.summary.max_body_height_error < 0.05);
    assert_eq!(log.summary.fallbacks, 0);
    for s in &log.steps {
        // Front feet rest on the real surface and carry load there.
        for (c, f) in s.normal_forces.iter().enumerate().take(2) {
            assert!((s.measured.q[6 + 3 * c + 2] - 0.12).abs() < 1e-6);
            assert!(*f > 1.0);
        }
    }
}

#[test]
fn flat_ground_offsets_are_safe() {
    let (model, flat, r) = standing(1.0);
    for dz in [-0.02, -0.01, 0.01, 0.02] {
        let sim = TerrainModel::flat(dz);
        let log = track_closed_loop(&model, &sim, &flat, &r, &MpcConfig::default(), &[]).unwrap();
        assert_eq!(log.termination, Termination::Completed, "offset {dz}");
    }
}

#[test]
fn commands_stay_within_bounds() {
    let model = build_quadruped(&QuadrupedParams { force_limit: 40.0, ..Default::default() }).unwrap();
    let flat = TerrainModel::flat(0.0);
    let r = standing_reference(&model, &flat, 0.05, 30).unwrap();
    let kick = Disturbance { time: 0.3, impulse: [8.0, -8.0, 0.0] };
    let log = track_closed_loop(&model, &flat, &flat, &r, &MpcConfig::default(), &[kick]).unwrap();
    let (lo, hi) = model.u_bounds();
    let mut saturated = false;
    for s in &log.steps {
        for i in 0..12 {
            assert!(s.control[i] >= lo[i] && s.control[i] <= hi[i]);
            saturated |= s.control[i] == lo[i] || s.control[i] == hi[i];
        }
    }
    assert!(saturated, "bounds never reached; the test is not exercising them");
}

#[test]
fn large_upward_impulse_trips_divergence_detection() {
    let (model, flat, r) = standing(1.0);
    let kick = Disturbance { time: 0.1, impulse: [0.0, 0.0, 60.0] };
    let log = track_closed_loop(&model, &flat, &flat, &r, &MpcConfig::default(), &[kick]).unwrap();
    assert!(log.diverged(), "{:?}", log.termination);
    assert!(log.steps.len() < r.steps());
}

#[test]
fn median_solve_time_fits_100_hz() {
    let (model, r) = cpr_reference();
    let cfg = MpcConfig::default();
    assert_eq!(cfg.horizon, 3);
    assert!((cfg.horizon_seconds(0.05) - 0.15).abs() < 1e-12);
    let log = track_closed_loop(&model, &TerrainModel::step(0.0, 0.12), &TerrainModel::step(0.0, 0.1), &r, &cfg, &[]).unwrap();
    assert!(log.summary.median_solve_time <= 0.01, "{}", log.summary.median_solve_time);
    assert!(log.steps.iter().all(|s| s.solve_time >= 0.0));
}

#[test]
fn reduced_update_rate_holds_the_plan() {
    let (model, flat, r) = standing(0.5);
    let cfg = MpcConfig { update_rate: 10.0, ..Default::default() };
    let log = track_closed_loop(&model, &flat, &flat, &r, &cfg, &[]).unwrap();
    let held = log.steps.iter().filter(|s| s.status == MpcStatus::Held).count();
    assert_eq!(held, log.steps.len() / 2);
    assert!(log.summary.max_state_error <= 1e-4);
    let bad = MpcConfig { update_rate: 15.0, ..Default::default() };
    assert!(matches!(track_closed_loop(&model, &flat, &flat, &r, &bad, &[]), Err(Error::InvalidParameter { .. })));
}

#[test]
fn config_is_validated() {
    let (model, flat, r) = standing(0.1);
    let long = MpcConfig { horizon: 3, ..Default::default() };
    assert!(MpcController::new(&model, &flat, &r, &long).is_err());
    let zero = MpcConfig { horizon: 0, ..Default::default() };
    assert!(zero.validate().is_err());
    assert!(MpcConfig { rho: 0.0, ..Default::default() }.validate().is_err());
    let json = serde_json::to_string(&MpcConfig::default()).unwrap();
    let back: MpcConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, MpcConfig::default());
}

#[test]
fn cyclic_mode_wraps_the_reference() {
    let (model, flat, r) = standing(0.5);
    let cfg = MpcConfig { cyclic: true, duration: 1.5, ..Default::default() };
    let log = track_closed_loop(&model, &flat, &flat, &r, &cfg, &[]).unwrap();
    assert_eq!(log.steps.len(), 30);
    assert!(log.summary.max_state_error <= 1e-4);
}

#[test]
fn relinearized_controller_recovers_offset() {
    let (model, flat, r) = standing(1.0);
    let cfg = MpcConfig { relinearize: true, ..Default::default() };
    let mut ctrl = MpcController::new(&model, &flat, &r, &cfg).unwrap();
    let mut x0 = r.states[0].clone();
    x0.q[2] += 0.01;
    let log = run_loop(&model, &flat, &r, &mut ctrl, &x0, &[]).unwrap();
    assert!((log.final_state.q[2] - 0.3).abs() < 2e-3, "{}", log.final_state.q[2]);
}

#[test]
fn csv_log_has_a_row_per_state() {
    let (model, flat, r) = standing(0.25);
    let log = track_closed_loop(&model, &flat, &flat, &r, &MpcConfig::default(), &[]).unwrap();
    let path = std::env::temp_dir().join(format!("legmimic_track_{}.csv", std::process::id()));
    log.write_csv(&model, &path).unwrap();
    let mut rd = csv::Reader::from_path(&path).unwrap();
    let header = rd.headers().unwrap().clone();
    assert_eq!(&header[0], "t");
    assert!(header.iter().any(|h| h == "front_left_fn"));
    assert_eq!(header.len(), 6 + 36 + 12 + 4 + 36);
    assert_eq!(rd.records().count(), log.steps.len() + 1);
    std::fs::remove_file(path).ok();
}

#[test]
fn warm_start_needs_no_more_iterations_than_cold() {
    let (model, flat, r) = standing(1.0);
    let cfg = MpcConfig { latency: false, ..Default::default() };
    let kick = Disturbance { time: 0.3, impulse: [0.0, 5.0, 0.0] };
    let mut ctrl = MpcController::new(&model, &flat, &r, &cfg).unwrap();
    let log = run_loop(&model, &flat, &r, &mut ctrl.clone(), &r.states[0], &[kick]).unwrap();
    let (mut warm, mut cold) = (0, 0);
    for s in &log.steps {
        let c = ctrl.solve(&s.measured, s.index, WarmStart::Reference).unwrap();
        let w = ctrl.step(&s.measured, s.index).unwrap();
        assert!(w.iterations <= c.iterations, "step {}: warm {} cold {}", s.index, w.iterations, c.iterations);
        warm += w.iterations;
        cold += c.iterations;
    }
    assert!(warm < cold, "warm {warm} cold {cold}");
}
