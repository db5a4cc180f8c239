//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any fails.

use std::path::{Path, PathBuf};
use std::time::Instant;

use legmimic::contact::{contact_mode_oracle, step_ncp, step_relaxed, RelaxationSchedule};
use legmimic::model::{build_humanoid, build_quadruped, smooth_dynamics, smooth_dynamics_jacobian, ModelSpec, State};
use legmimic::mpc::{track_closed_loop, MpcConfig, MpcStatus, Termination};
use legmimic::retarget::{resample, retarget, scale_and_ground, RetargetConfig};
use legmimic::sim::{pd_tracking_policy, physics_rollout_cost, rollout, ContactMode, PdGains};
use legmimic::terrain::TerrainModel;
use legmimic::testkit::{
    closed_form_fixtures, evaluate_fixture, finite_difference_jacobian, generate_synthetic_keypoints, point_mass_model,
    point_mass_state, standing_reference, FixtureKind, Pattern, Stepper, SyntheticParams,
};
use legmimic::trajopt::{solve_reference, TrajOptProblem};
use legmimic_cli::pipeline::{load_inputs, run_optimize, run_pipeline, run_retarget, run_track};
use legmimic_cli::scenario::{load_scenario, validate_scenario};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const G: f64 = 9.81;

type Outcome = Result<String, String>;
type Criterion = fn() -> Outcome;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

const SHIPPED: [&str; 5] = ["dog-reach", "cat-pace", "dog-cpr", "human-stretch", "human-wave"];

fn quad() -> ModelSpec {
    build_quadruped(&Default::default()).unwrap()
}

fn rel_err(a: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
    (a - fd).amax() / fd.amax().max(1.0)
}

fn contact_gaps(model: &ModelSpec, terrain: &TerrainModel, s: &State) -> Vec<f64> {
    model.contact_points(&s.q).iter().map(|c| terrain.signed_distance(&c.position)).collect()
}

fn c1_contact_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_x, mut worst_f) = (0.0_f64, 0.0_f64);
    for _ in 0..1000 {
        let points = rng.gen_range(1..=2);
        let mu = if rng.gen_bool(0.15) { 0.0 } else { rng.gen_range(0.1..1.0) };
        let model = point_mass_model(rng.gen_range(0.2..2.0), mu, points).unwrap();
        let pos: Vec<Vector3<f64>> =
            (0..points).map(|i| Vector3::new(rng.gen_range(-0.5..0.5), 0.3 * i as f64, rng.gen_range(-0.02..0.1))).collect();
        let vel: Vec<Vector3<f64>> =
            (0..points).map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let x = point_mass_state(&model, &pos, &vel).unwrap();
        let u = DVector::from_fn(model.n_u, |k, _| rng.gen_range(model.u_min[k]..model.u_max[k]) * 0.2);
        let terrain = TerrainModel::flat(0.0);
        let a = step_ncp(&model, &terrain, 0.01, &x, &u, &RelaxationSchedule::default()).map_err(|e| e.to_string())?;
        let b = contact_mode_oracle(&model, &terrain, 0.01, &x, &u).map_err(|e| e.to_string())?;
        worst_x = worst_x.max((a.next_state.to_vector() - b.next_state.to_vector()).amax());
        for (fa, fb) in a.forces.iter().zip(&b.forces) {
            worst_f = worst_f.max((fa.normal - fb.normal).abs());
            for k in 0..fa.tangential.len() {
                worst_f = worst_f.max((fa.tangential[k] - fb.tangential[k]).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_x <= 1e-6 && worst_f <= 1e-5 && secs < 60.0,
        format!("1000 cases, max state diff {worst_x:.1e}, max force diff {worst_f:.1e} N, {secs:.1} s"),
    )
}

fn c2_closed_forms() -> Outcome {
    let q = quad();
    let mut lines = vec![];
    let mut ok = true;
    for case in closed_form_fixtures().map_err(|e| e.to_string())? {
        // Analytic values, derived here from the fixture inputs.
        let analytic: Vec<f64> = match &case.kind {
            FixtureKind::TouchdownTime => vec![(2.0 * case.state.q[8] / G).sqrt()],
            FixtureKind::ImpactImpulse => vec![case.model.limbs[0].limb_mass * (-case.state.v[8] + G * case.h)],
            FixtureKind::SlideDistance => vec![case.state.v[6].powi(2) / (2.0 * case.model.friction_coefficient * G)],
            FixtureKind::NormalForces => {
                let mass = q.body_mass + q.limbs.iter().map(|l| l.limb_mass).sum::<f64>();
                vec![mass * G / 4.0; 4]
            }
            FixtureKind::SpringPenetration { k, .. } => vec![case.model.limbs[0].limb_mass * G / k],
        };
        let mut steppers = vec![Stepper::Ncp];
        if !matches!(case.kind, FixtureKind::SpringPenetration { .. }) {
            steppers.push(Stepper::Oracle);
        }
        for st in steppers {
            let got = evaluate_fixture(&case, st).map_err(|e| e.to_string())?;
            let rel = got.iter().zip(&analytic).map(|(g, a)| (g - a).abs() / a.abs()).fold(0.0, f64::max);
            ok &= got.len() == analytic.len() && rel <= 1e-4;
            lines.push(format!("{:?}/{st:?} {rel:.1e}", case.kind).replace(" { k: 10000.0, b: 100.0 }", ""));
        }
    }
    check(ok && lines.len() == 9, format!("relative errors: {}", lines.join(", ")))
}

fn c3_penetration() -> Outcome {
    let start = Instant::now();
    let model = quad();
    let params = SyntheticParams { penetration: 0.02, ..Default::default() };
    let track = generate_synthetic_keypoints(Pattern::Cpr, &params, 11).map_err(|e| e.to_string())?;
    let terrain = TerrainModel::step(0.0, 0.1);
    let cfg = RetargetConfig::default();
    let r = retarget(&track, &model, &cfg, 0.05).map_err(|e| e.to_string())?;
    let injected = r.states.iter().flat_map(|s| contact_gaps(&model, &terrain, s)).fold(f64::MAX, f64::min);
    let p = TrajOptProblem::new(model.clone(), terrain.clone(), r.states.clone(), 0.05);
    let traj = solve_reference(&p).map_err(|e| e.to_string())?;
    let min_phi = traj.states.iter().flat_map(|s| contact_gaps(&model, &terrain, s)).fold(f64::MAX, f64::min);
    // Key points after scaling, grounding and resampling onto the knots.
    let kp = resample(&scale_and_ground(&track, &cfg).map_err(|e| e.to_string())?, 0.05).map_err(|e| e.to_string())?;
    let mut worst = 0.0_f64;
    for (limb, lay) in model.limbs.iter().zip(model.limb_layouts()) {
        let mut ss = 0.0;
        for (k, s) in traj.states.iter().enumerate() {
            let p = kp.point(k, &limb.name).ok_or("missing key point")?;
            ss += (0..3).map(|i| (s.q[lay.q + i] - p[i]).powi(2)).sum::<f64>();
        }
        worst = worst.max((ss / traj.states.len() as f64).sqrt());
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        injected < -0.019 && min_phi >= -1e-4 && worst <= 0.05 && secs < 300.0,
        format!("key-point min phi {injected:.4} m -> optimized min phi {min_phi:.1e} m, worst foot RMSE {worst:.4} m, {secs:.2} s"),
    )
}

fn c4_timing() -> Outcome {
    let expected = [
        ("dog-reach", 5.0, None),
        ("cat-pace", 3.0, Some(0.05)),
        ("dog-cpr", 0.65, None),
        ("human-stretch", 3.8, Some(0.1)),
        ("human-wave", 4.0, None),
    ];
    let mut parts = vec![];
    let mut ok = true;
    for (name, duration, h) in expected {
        let r = validate_scenario(scenario_path(name));
        let d = r.duration.unwrap_or(f64::NAN);
        ok &= r.ok() && (d - duration).abs() < 1e-9 && h.is_none_or(|h| (r.h.unwrap_or(0.0) - h).abs() < 1e-12);
        parts.push(format!("{name} {} x {} s = {d:.2} s", r.knots.unwrap_or(0), r.h.unwrap_or(0.0)));
    }
    check(ok, parts.join(", "))
}

fn c5_fixed_point() -> Outcome {
    let model = quad();
    let flat = TerrainModel::flat(0.0);
    let r = standing_reference(&model, &flat, 0.05, 40).map_err(|e| e.to_string())?;
    let log = track_closed_loop(&model, &flat, &flat, &r, &MpcConfig::default(), &[]).map_err(|e| e.to_string())?;
    let states = log.states();
    let err = states
        .iter()
        .zip(&r.states)
        .map(|(a, b)| (a.to_vector() - b.to_vector()).amax())
        .fold(0.0, f64::max);
    check(
        log.termination == Termination::Completed && states.len() == r.states.len() && err <= 1e-4,
        format!("{} steps over 2 s, max state error {err:.1e}", log.steps.len()),
    )
}

fn c6_mismatch() -> Outcome {
    let ls = load_scenario(scenario_path("dog-cpr")).map_err(|e| e.to_string())?;
    let inputs = load_inputs(&ls).map_err(|e| e.to_string())?;
    let at = Vector3::new(0.5, 0.0, 0.0);
    let mismatch = inputs.sim_terrain.height(at.x, at.y) - inputs.mpc_terrain.height(at.x, at.y);
    let r = run_retarget(&ls, &inputs).map_err(|e| e.to_string())?;
    let traj = run_optimize(&ls, &inputs, &r).map_err(|e| e.to_string())?;
    let log = run_track(&ls, &inputs, &traj).map_err(|e| e.to_string())?;
    let height_err = log
        .states()
        .iter()
        .zip(&log.reference)
        .map(|(a, b)| (a.q[2] - b.q[2]).abs())
        .fold(0.0, f64::max);
    check(
        (mismatch - 0.02).abs() < 1e-12 && log.termination == Termination::Completed && height_err < 0.05,
        format!("step {:.2} m simulated vs {:.2} m planned, {:?}, max body height error {height_err:.4} m", inputs.sim_terrain.height(0.5, 0.0), inputs.mpc_terrain.height(0.5, 0.0), log.termination),
    )
}

fn hardware() -> String {
    let info = std::fs::read_to_string("/proc/cpuinfo").unwrap_or_default();
    let name = info
        .lines()
        .find(|l| l.starts_with("model name"))
        .and_then(|l| l.split(':').nth(1))
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown CPU".into());
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpus} CPU, {name}")
}

fn c7_solve_time() -> Outcome {
    let ls = load_scenario(scenario_path("cat-pace")).map_err(|e| e.to_string())?;
    let inputs = load_inputs(&ls).map_err(|e| e.to_string())?;
    let r = run_retarget(&ls, &inputs).map_err(|e| e.to_string())?;
    let traj = run_optimize(&ls, &inputs, &r).map_err(|e| e.to_string())?;
    let cfg = &ls.scenario.mpc;
    let horizon = cfg.horizon as f64 * ls.scenario.h;
    let log = run_track(&ls, &inputs, &traj).map_err(|e| e.to_string())?;
    let mut t: Vec<f64> = log.steps.iter().filter(|s| s.status != MpcStatus::Held).map(|s| s.solve_time).collect();
    t.sort_by(f64::total_cmp);
    let median = if t.len() % 2 == 1 { t[t.len() / 2] } else { 0.5 * (t[t.len() / 2 - 1] + t[t.len() / 2]) };
    check(
        (horizon - 0.15).abs() < 1e-12 && !t.is_empty() && median <= 0.01,
        format!("horizon {horizon:.2} s, {} solves, median {:.3} ms, max {:.3} ms on {}", t.len(), median * 1e3, t.last().unwrap_or(&0.0) * 1e3, hardware()),
    )
}

fn c8_jacobians() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let models = [quad(), build_humanoid(&Default::default()).unwrap()];
    let mut worst_smooth = 0.0_f64;
    for k in 0..100 {
        let m = &models[k % 2];
        let mut s = m.nominal_state(Vector3::new(0.0, 0.0, m.nominal_height));
        s.q.iter_mut().for_each(|x| *x += rng.gen_range(-0.2..0.2));
        s.v.iter_mut().for_each(|x| *x = rng.gen_range(-2.0..2.0));
        let u = DVector::from_fn(m.n_u, |i, _| rng.gen_range(m.u_min[i]..m.u_max[i]) * 0.3);
        let (ja, jb) = smooth_dynamics_jacobian(m, &s, &u).map_err(|e| e.to_string())?;
        let fx = finite_difference_jacobian(|x| smooth_dynamics(m, &State::from_vector(m, x).unwrap(), &u).unwrap(), &s.to_vector(), 1e-6);
        let fu = finite_difference_jacobian(|v| smooth_dynamics(m, &s, v).unwrap(), &u, 1e-6);
        worst_smooth = worst_smooth.max(rel_err(&ja, &fx)).max(rel_err(&jb, &fu));
    }
    let mut worst_step = 0.0_f64;
    let flat = TerrainModel::flat(0.0);
    for k in 0..100 {
        let m = &models[k % 2];
        let mut s = m.nominal_state(Vector3::new(0.0, 0.0, m.nominal_height));
        s.q.iter_mut().for_each(|x| *x += rng.gen_range(-0.01..0.01));
        s.v.iter_mut().for_each(|x| *x = rng.gen_range(-0.3..0.3));
        let grounded = vec![true; m.limbs.len()];
        let u = m.gravity_compensation(&grounded) + DVector::from_fn(m.n_u, |_, _| rng.gen_range(-2.0..2.0));
        let rho = [1e-2, 1e-3][k / 2 % 2];
        let h = 0.02;
        let base = step_relaxed(m, &flat, h, &s, &u, rho, None, true).map_err(|e| e.to_string())?;
        let warm = base.solutions.clone();
        let fx = finite_difference_jacobian(
            |x| step_relaxed(m, &flat, h, &State::from_vector(m, x).unwrap(), &u, rho, Some(&warm), false).unwrap().next_state.to_vector(),
            &s.to_vector(),
            1e-6,
        );
        let fu = finite_difference_jacobian(
            |v| step_relaxed(m, &flat, h, &s, v, rho, Some(&warm), false).unwrap().next_state.to_vector(),
            &u,
            1e-6,
        );
        worst_step = worst_step.max(rel_err(&base.dx, &fx)).max(rel_err(&base.du, &fu));
    }
    check(
        worst_smooth <= 1e-4 && worst_step <= 1e-4,
        format!("100 points each, smooth dynamics {worst_smooth:.1e}, relaxed step {worst_step:.1e} (relative)"),
    )
}

fn c9_plausibility() -> Outcome {
    let model = quad();
    let track = generate_synthetic_keypoints(Pattern::Pace, &SyntheticParams::default(), 9).map_err(|e| e.to_string())?;
    let h = 0.01;
    let r = retarget(&track, &model, &RetargetConfig::default(), h).map_err(|e| e.to_string())?;
    let n = 100;
    let grounded: Vec<DVector<f64>> = r.states.iter().take(n + 1).map(|s| s.q.clone()).collect();
    let z_rows: Vec<usize> = std::iter::once(2).chain(model.limb_layouts().iter().map(|l| l.q + 2)).collect();
    let floated: Vec<DVector<f64>> = grounded
        .iter()
        .map(|q| {
            let mut q = q.clone();
            z_rows.iter().for_each(|&k| q[k] += 0.3);
            q
        })
        .collect();
    let flat = TerrainModel::flat(0.0);
    let gains = PdGains::default();
    let cost = |q_d: &Vec<DVector<f64>>| -> Result<f64, String> {
        let x0 = State { q: q_d[0].clone(), v: DVector::zeros(model.n_v) };
        let mut pol = pd_tracking_policy(&model, q_d.clone(), None, &gains, h).map_err(|e| e.to_string())?;
        let log = rollout(&model, &flat, &x0, &mut pol, h, n, &ContactMode::default()).map_err(|e| e.to_string())?;
        if log.steps() != n {
            return Err(format!("roll-out stopped after {} steps", log.steps()));
        }
        let q: Vec<DVector<f64>> = log.states.iter().map(|s| s.q.clone()).collect();
        physics_rollout_cost(&q, q_d).map_err(|e| e.to_string())
    };
    let (g, f) = (cost(&grounded)?, cost(&floated)?);
    check(f > g, format!("physics roll-out cost grounded {g:.4e}, floated 0.3 m {f:.4e}"))
}

fn c10_determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("legmimic-acceptance-{}", std::process::id()));
    let mut parts = vec![];
    let mut ok = true;
    for name in SHIPPED {
        let ls = load_scenario(scenario_path(name)).map_err(|e| e.to_string())?;
        let mut reports = vec![];
        for run in ["a", "b"] {
            let out = dir.join(name).join(run);
            run_pipeline(&ls, &out).map_err(|e| e.to_string())?;
            reports.push(std::fs::read(out.join("report.json")).map_err(|e| e.to_string())?);
        }
        let same = reports[0] == reports[1];
        ok &= same;
        parts.push(format!("{name} {}", if same { "identical" } else { "DIFFERENT" }));
    }
    std::fs::remove_dir_all(&dir).ok();
    check(ok, parts.join(", "))
}

fn main() {
    let criteria: [(&str, Criterion); 10] = [
        ("contact-oracle equivalence", c1_contact_oracle),
        ("closed-form mechanics", c2_closed_forms),
        ("penetration elimination", c3_penetration),
        ("experiment timing fidelity", c4_timing),
        ("MPC fixed point", c5_fixed_point),
        ("terrain-mismatch robustness", c6_mismatch),
        ("real-time consistency", c7_solve_time),
        ("Jacobian correctness", c8_jacobians),
        ("physics-plausibility ordering", c9_plausibility),
        ("determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag} {name}: {detail}", i + 1);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
