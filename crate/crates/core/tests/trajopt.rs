use legmimic::contact::step_relaxed;
use legmimic::model::{build_quadruped, ModelSpec, QuadrupedParams, State};
use legmimic::retarget::{retarget, RetargetConfig};
use legmimic::terrain::TerrainModel;
use legmimic::testkit::{generate_synthetic_keypoints, Pattern, SyntheticParams};
use legmimic::trajopt::{
    check_dynamics_feasibility, evaluate_objective, extract_contact_schedule, reduced_gradient, solve_reference,
    ControlBaseline, ReferenceTrajectory, SolveStatus, TrackingWeights, TrajOptProblem,
};
use nalgebra::{DVector, Vector3};

fn quadruped() -> ModelSpec {
    build_quadruped(&QuadrupedParams::default()).unwrap()
}

fn standing_problem(t: usize) -> TrajOptProblem {
    let model = quadruped();
    let x = model.nominal_state(Vector3::new(0.0, 0.0, 0.3));
    TrajOptProblem::new(model, TerrainModel::flat(0.0), vec![x; t], 0.05)
}

fn cpr_problem() -> (TrajOptProblem, Vec<State>) {
    let model = quadruped();
    let params = SyntheticParams { penetration: 0.02, ..Default::default() };
    let track = generate_synthetic_keypoints(Pattern::Cpr, &params, 0).unwrap();
    let r = retarget(&track, &model, &RetargetConfig::default(), 0.05).unwrap();
    let p = TrajOptProblem::new(model, TerrainModel::step(0.0, 0.1), r.states.clone(), 0.05);
    (p, r.states)
}

fn min_gap(p: &TrajOptProblem, states: &[State]) -> f64 {
    states
        .iter()
        .flat_map(|s| p.model.contact_points(&s.q))
        .map(|c| p.terrain.signed_distance(&c.position))
        .fold(f64::INFINITY, f64::min)
}

fn max_state_diff(a: &[State], b: &[State]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.to_vector() - y.to_vector()).amax()).fold(0.0, f64::max)
}

#[test]
fn static_reference_solves_to_the_stance() {
    let p = standing_problem(20);
    let sol = solve_reference(&p).unwrap();
    assert_eq!(sol.status, SolveStatus::Converged);
    assert!(max_state_diff(&sol.states, &p.reference) <= 1e-4);
    // Static equilibrium: each foot carries a quarter of the body weight,
    // and the body receives the opposite of each limb force.
    let share = 12.0 * 9.81 / 4.0;
    for u in &sol.controls {
        for leg in 0..4 {
            assert!(u[3 * leg].abs() < 1e-3 && u[3 * leg + 1].abs() < 1e-3, "{u}");
            assert!((u[3 * leg + 2] + share).abs() < 1e-3, "{}", u[3 * leg + 2]);
        }
    }
    let sched = extract_contact_schedule(&sol, 0.01 * p.model.weight());
    assert!(sched.iter().flatten().all(|&c| c));
}

#[test]
fn injected_penetration_is_removed() {
    let (p, reference) = cpr_problem();
    assert!(min_gap(&p, &reference) < -0.019);
    let sol = solve_reference(&p).unwrap();
    assert!(sol.min_gap >= -1e-4, "{}", sol.min_gap);
    assert!(min_gap(&p, &sol.states) >= -1e-4);
    assert!(sol.cost.is_finite());
    assert!(!sol.is_flagged());
}

#[test]
fn solver_output_passes_feasibility_and_matches_objective() {
    let (p, _) = cpr_problem();
    let sol = solve_reference(&p).unwrap();
    let report = check_dynamics_feasibility(&sol, &p.model, &p.terrain, p.config.dynamics_tolerance).unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.defects.len(), sol.steps());
    let j = evaluate_objective(&p, &sol).unwrap();
    assert!((j - sol.cost).abs() <= 1e-10 * (1.0 + j.abs()));
    let (lo, hi) = p.model.u_bounds();
    for u in &sol.controls {
        for i in 0..u.len() {
            assert!(u[i] >= lo[i] && u[i] <= hi[i]);
        }
    }
    for h in &sol.h {
        assert!(*h >= p.h_min() - 1e-15 && *h <= p.h_max() + 1e-15);
    }
}

#[test]
fn raw_keypoint_reference_is_dynamically_infeasible() {
    let (p, reference) = cpr_problem();
    let raw = ReferenceTrajectory::from_states(&p.model, reference, 0.05).unwrap();
    let report = check_dynamics_feasibility(&raw, &p.model, &p.terrain, 1e-6).unwrap();
    assert!(!report.passed);
    // With no forces every limb falls freely: at least g h^2 per step.
    assert!(report.max_defect >= 9.81 * 0.05 * 0.05 * 0.99, "{}", report.max_defect);
    let lax = check_dynamics_feasibility(&raw, &p.model, &p.terrain, f64::INFINITY).unwrap();
    assert!(lax.passed);
}

#[test]
fn flight_phase_has_no_active_contacts() {
    let model = quadruped();
    let states: Vec<State> = (0..4).map(|k| model.nominal_state(Vector3::new(0.0, 0.0, 1.0 - 0.01 * k as f64))).collect();
    let traj = ReferenceTrajectory::from_states(&model, states, 0.05).unwrap();
    let sched = extract_contact_schedule(&traj, 1.0);
    assert_eq!(sched.len(), 3);
    assert!(sched.iter().flatten().all(|&c| !c));
}

#[test]
fn schedule_thresholds_normal_force_strictly() {
    let model = quadruped();
    let x = model.nominal_state(Vector3::new(0.0, 0.0, 0.3));
    let mut traj = ReferenceTrajectory::from_states(&model, vec![x.clone(), x], 0.05).unwrap();
    traj.forces[0][0].normal = 5.0;
    traj.forces[0][1].normal = 5.0 + 1e-9;
    let s = extract_contact_schedule(&traj, 5.0);
    assert_eq!(s, vec![vec![false, true, false, false]]);
}

/// T = 2 by hand: one stage term and the terminal term.
#[test]
fn objective_on_two_step_toy_matches_hand_sum() {
    let mut p = standing_problem(2);
    p.config.control_baseline = ControlBaseline::Zero;
    p.config.optimize_h = false;
    let n_x = p.model.n_x();
    p.weights = TrackingWeights {
        q: (0..n_x).map(|i| 1.0 + i as f64).collect(),
        r: vec![0.5; p.model.n_u],
        q_n: (0..n_x).map(|i| 2.0 * i as f64).collect(),
    };
    let mut cand = ReferenceTrajectory::from_states(&p.model, p.reference.clone(), 0.05).unwrap();
    cand.states[0].q[2] += 0.1;
    cand.states[0].v[0] -= 0.2;
    cand.states[1].q[7] += 0.3;
    let j = evaluate_objective(&p, &cand).unwrap();
    let n_q = p.model.n_q;
    let stage = 0.5 * 0.05 * (3.0 * 0.01 + (n_q as f64 + 1.0) * 0.04);
    let terminal = 14.0 * 0.09;
    assert!((j - (stage + terminal)).abs() < 1e-14, "{j}");

    cand.controls[0][4] = 2.0;
    let j2 = evaluate_objective(&p, &cand).unwrap();
    assert!((j2 - j - 0.5 * 0.05 * 0.5 * 4.0).abs() < 1e-14);
}

#[test]
fn objective_is_zero_for_zero_weights_and_linear_in_weights() {
    let (mut p, _) = cpr_problem();
    let mut cand = ReferenceTrajectory::from_states(&p.model, p.reference.clone(), 0.05).unwrap();
    for (k, s) in cand.states.iter_mut().enumerate() {
        s.q[2] += 0.01 * k as f64;
    }
    cand.h[3] = 0.06;
    cand.controls[2][5] = -40.0;
    let j = evaluate_objective(&p, &cand).unwrap();
    assert!(j > 0.0);
    let base = p.weights.clone();
    p.weights = base.scaled(2.0);
    let j2 = evaluate_objective(&p, &cand).unwrap();
    assert!((j2 - 2.0 * j).abs() <= 1e-12 * j);
    p.weights = base.scaled(0.0);
    assert_eq!(evaluate_objective(&p, &cand).unwrap(), 0.0);
}

#[test]
fn tenfold_weights_give_the_same_solution() {
    for optimize_h in [false, true] {
        let (mut p, _) = cpr_problem();
        p.config.optimize_h = optimize_h;
        let a = solve_reference(&p).unwrap();
        p.weights = p.weights.scaled(10.0);
        let b = solve_reference(&p).unwrap();
        let d = max_state_diff(&a.states, &b.states);
        assert!(d <= 1e-6, "optimize_h {optimize_h}: {d}");
        let dh = a.h.iter().zip(&b.h).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(dh <= 1e-6);
        assert!((b.cost - 10.0 * a.cost).abs() <= 1e-6 * b.cost);
    }
}

#[test]
fn zero_control_weight_keeps_dynamics_feasible() {
    let (mut p, _) = cpr_problem();
    p.weights.r.iter_mut().for_each(|r| *r = 0.0);
    let sol = solve_reference(&p).unwrap();
    let report = check_dynamics_feasibility(&sol, &p.model, &p.terrain, p.config.dynamics_tolerance).unwrap();
    assert!(report.passed, "{report:?}");
    assert!(sol.min_gap >= -1e-4);
}

/// Relaxed objective of an open-loop control sequence, rolled out here with
/// the public relaxed step and scored with `evaluate_objective`.
fn relaxed_objective(p: &TrajOptProblem, z: &DVector<f64>, rho: f64) -> f64 {
    let n_u = p.model.n_u;
    let m = n_u + 1;
    let n = p.horizon() - 1;
    let mut traj = ReferenceTrajectory::from_states(&p.model, p.reference.clone(), p.h_nom).unwrap();
    let mut x = p.reference[0].clone();
    for t in 0..n {
        let u = z.rows(t * m, n_u).into_owned();
        let h = z[t * m + n_u];
        x = step_relaxed(&p.model, &p.terrain, h, &x, &u, rho, None, false).unwrap().next_state;
        traj.controls[t] = u;
        traj.h[t] = h;
        traj.states[t + 1] = x.clone();
    }
    evaluate_objective(p, &traj).unwrap()
}

#[test]
fn reduced_gradient_matches_finite_differences() {
    let model = quadruped();
    let base = model.nominal_state(Vector3::new(0.0, 0.0, 0.3));
    let reference: Vec<State> = (0..5)
        .map(|k| {
            let mut s = base.clone();
            s.q[0] += 0.01 * k as f64;
            s.q[5] += 0.02 * k as f64;
            s.q[8] += if k == 2 { 0.03 } else { 0.0 };
            s
        })
        .collect();
    let p = TrajOptProblem::new(model, TerrainModel::flat(0.0), reference, 0.05);
    let rho = 1e-3;
    let n_u = p.model.n_u;
    let comp = p.model.gravity_compensation(&[true; 4]);
    let mut z = DVector::zeros(4 * (n_u + 1));
    let mut controls = vec![];
    let mut hs = vec![];
    for t in 0..4 {
        let mut u = comp.clone();
        u[0] += 1.5 * t as f64;
        u[5] -= 2.0;
        let h = 0.05 + 0.002 * t as f64;
        z.rows_mut(t * (n_u + 1), n_u).copy_from(&u);
        z[t * (n_u + 1) + n_u] = h;
        controls.push(u);
        hs.push(h);
    }
    let g = reduced_gradient(&p, &controls, &hs, rho).unwrap();
    assert_eq!(g.len(), z.len());
    let mut worst: f64 = 0.0;
    for i in 0..z.len() {
        let step = if i % (n_u + 1) == n_u { 1e-7 } else { 1e-5 };
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[i] += step;
        zm[i] -= step;
        let fd = (relaxed_objective(&p, &zp, rho) - relaxed_objective(&p, &zm, rho)) / (2.0 * step);
        worst = worst.max((fd - g[i]).abs() / (1.0 + g.amax()));
    }
    assert!(worst <= 1e-4, "{worst}");
}

fn inactive_runs(col: &[bool]) -> usize {
    let mut runs = 0;
    let mut prev = true;
    for &c in col {
        if !c && prev {
            runs += 1;
        }
        prev = c;
    }
    runs
}

#[test]
fn walking_reference_yields_a_gait() {
    let model = quadruped();
    let track = generate_synthetic_keypoints(Pattern::Pace, &SyntheticParams::default(), 0).unwrap();
    let r = retarget(&track, &model, &RetargetConfig::default(), 0.05).unwrap();
    assert_eq!(r.states.len(), 60);
    let p = TrajOptProblem::new(model, TerrainModel::flat(0.0), r.states, 0.05);
    let sol = solve_reference(&p).unwrap();
    assert_eq!(sol.status, SolveStatus::Converged);
    assert!(sol.min_gap >= -1e-4);
    let sched = &sol.contact_schedule;
    let cols: Vec<Vec<bool>> = (0..4).map(|c| sched.iter().map(|s| s[c]).collect()).collect();
    for (c, col) in cols.iter().enumerate() {
        assert!(inactive_runs(col) >= 1, "contact {c} never lifts");
    }
    // Feet take turns: the swing sets differ and the body is never unsupported.
    assert!(cols.iter().any(|a| cols.iter().any(|b| a != b)));
    assert!(sched.iter().all(|s| s.iter().filter(|&&c| c).count() >= 2));
}

#[test]
fn humanoid_references_solve() {
    let model = legmimic::model::build_humanoid(&legmimic::model::HumanoidParams::default()).unwrap();
    for (pattern, frames) in [(Pattern::Stretch, 38), (Pattern::Wave, 40)] {
        let track = generate_synthetic_keypoints(pattern, &SyntheticParams::default(), 0).unwrap();
        let r = retarget(&track, &model, &RetargetConfig::default(), 0.1).unwrap();
        assert_eq!(r.states.len(), frames);
        let p = TrajOptProblem::new(model.clone(), TerrainModel::flat(0.0), r.states, 0.1);
        let sol = solve_reference(&p).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged, "{pattern:?}");
        assert!(sol.min_gap >= -1e-4);
        assert!(sol.max_dynamics_defect <= p.config.dynamics_tolerance);
    }
}
