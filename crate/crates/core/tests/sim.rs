use legmimic::contact::RelaxationSchedule;
use legmimic::model::{build_quadruped, QuadrupedParams, State};
use legmimic::sim::{
    feasibility_report, pd_tracking_policy, physics_rollout_cost, rollout, ConstantPolicy, ContactMode,
    FeasibilityTolerances, PdGains, Policy, RolloutLog,
};
use legmimic::terrain::TerrainModel;
use legmimic::testkit::{point_mass_model, point_mass_state};
use nalgebra::{DVector, Vector3};

fn stance() -> (legmimic::model::ModelSpec, State, DVector<f64>) {
    let model = build_quadruped(&QuadrupedParams::default()).unwrap();
    let x0 = model.nominal_state(Vector3::new(0.0, 0.0, model.nominal_height));
    let u = model.gravity_compensation(&[true; 4]);
    (model, x0, u)
}

#[test]
fn standing_balance_holds_height_for_one_second() {
    let (model, x0, u) = stance();
    let log = rollout(
        &model,
        &TerrainModel::flat(0.0),
        &x0,
        &mut ConstantPolicy(u),
        0.01,
        100,
        &ContactMode::default(),
    )
    .unwrap();
    assert_eq!(log.states.len(), 101);
    assert!(log.events.is_empty());
    let drift = log
        .states
        .iter()
        .map(|s| (s.q[2] - x0.q[2]).abs())
        .fold(0.0, f64::max);
    assert!(drift < 1e-3, "drift {drift}");
}

#[test]
fn rollout_is_deterministic_and_consistent() {
    let (model, x0, u) = stance();
    let terrain = TerrainModel::flat(0.0);
    let mut x1 = x0.clone();
    x1.v[0] = 0.2;
    let run = || {
        rollout(&model, &terrain, &x1, &mut ConstantPolicy(u.clone()), 0.01, 20, &ContactMode::default()).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert_eq!(a.times.len(), a.states.len());
    assert_eq!(a.controls.len(), a.steps());
    assert_eq!(a.forces.len(), a.steps());
    assert_eq!(a.residuals.len(), a.steps());
    assert!(a.times.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn rollout_rejects_zero_steps() {
    let (model, x0, u) = stance();
    let err = rollout(
        &model,
        &TerrainModel::flat(0.0),
        &x0,
        &mut ConstantPolicy(u),
        0.01,
        0,
        &ContactMode::default(),
    );
    assert!(matches!(err, Err(legmimic::Error::InvalidParameter { .. })));
}

#[test]
fn solver_failure_truncates_log() {
    let (model, mut x0, u) = stance();
    x0.v[2] = -1.0;
    let schedule = RelaxationSchedule {
        accept_tolerance: 1e-14,
        polish: false,
        ..Default::default()
    };
    let log = rollout(
        &model,
        &TerrainModel::flat(0.0),
        &x0,
        &mut ConstantPolicy(u),
        0.01,
        10,
        &ContactMode::Ncp { schedule },
    )
    .unwrap();
    assert!(log.steps() < 10);
    assert_eq!(log.events.len(), 1);
}

#[test]
fn spring_rollout_runs() {
    let (model, x0, u) = stance();
    let log = rollout(
        &model,
        &TerrainModel::flat(0.0),
        &x0,
        &mut ConstantPolicy(u),
        1e-3,
        50,
        &ContactMode::SpringDamper { k: 1e5, b: 500.0 },
    )
    .unwrap();
    assert_eq!(log.steps(), 50);
    assert!(log.states.iter().all(|s| s.is_finite()));
}

#[test]
fn pd_policy_zero_error_gives_zero_control() {
    let (model, x0, _) = stance();
    let mut pol = pd_tracking_policy(
        &model,
        vec![x0.q.clone()],
        Some(vec![DVector::zeros(model.n_v)]),
        &PdGains::default(),
        0.01,
    )
    .unwrap();
    assert_eq!(pol.control(0.0, &x0).amax(), 0.0);
}

#[test]
fn pd_policy_unit_limb_error() {
    let (model, x0, _) = stance();
    let lay = model.limb_layouts()[2];
    let mut target = x0.q.clone();
    target[lay.q + 1] += 1.0;
    let gains = PdGains { kp: 100.0, kd: 0.0 };
    let pol = pd_tracking_policy(&model, vec![target], None, &gains, 0.01).unwrap();
    let u = pol.raw_control(0.0, &x0);
    for i in 0..model.n_u {
        let want = if i == lay.u + 1 { 100.0 } else { 0.0 };
        assert!((u[i] - want).abs() < 1e-12, "channel {i}: {}", u[i]);
    }
}

#[test]
fn pd_policy_body_error_is_shared_by_limbs() {
    let (model, x0, _) = stance();
    let mut target = x0.q.clone();
    target[2] += 0.1;
    let gains = PdGains { kp: 400.0, kd: 0.0 };
    let pol = pd_tracking_policy(&model, vec![target], None, &gains, 0.01).unwrap();
    let u = pol.raw_control(0.0, &x0);
    for lay in model.limb_layouts() {
        assert!((u[lay.u + 2] + 10.0).abs() < 1e-12);
    }
}

#[test]
fn pd_policy_clips() {
    let (model, x0, _) = stance();
    let mut target = x0.q.clone();
    target[6] += 10.0;
    let mut pol = pd_tracking_policy(&model, vec![target], None, &PdGains::default(), 0.01).unwrap();
    let u = pol.control(0.0, &x0);
    assert!(u.iter().zip(&model.u_max).all(|(a, b)| a <= b));
    assert!(u.iter().zip(&model.u_min).all(|(a, b)| a >= b));
}

#[test]
fn pd_policy_rejects_bad_inputs() {
    let (model, x0, _) = stance();
    let bad = PdGains { kp: -1.0, kd: 0.0 };
    assert!(pd_tracking_policy(&model, vec![x0.q.clone()], None, &bad, 0.01).is_err());
    assert!(pd_tracking_policy(&model, vec![], None, &PdGains::default(), 0.01).is_err());
    assert!(pd_tracking_policy(&model, vec![DVector::zeros(3)], None, &PdGains::default(), 0.01).is_err());
}

#[test]
fn physics_cost_examples() {
    let a = vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![0.0, 0.0])];
    assert_eq!(physics_rollout_cost(&a, &a).unwrap(), 0.0);
    let b = vec![DVector::from_vec(vec![1.0, 3.0]), DVector::from_vec(vec![2.0, 0.0])];
    assert_eq!(physics_rollout_cost(&a, &b).unwrap(), 5.0);
    assert!(physics_rollout_cost(&a, &b[..1]).is_err());
}

#[test]
fn feasibility_reports_injected_penetration() {
    let (model, x0, _) = stance();
    let lay = model.limb_layouts()[1];
    let mut x1 = x0.clone();
    x1.q[lay.q + 2] = -0.02;
    let log = RolloutLog::kinematic(vec![0.0, 0.1, 0.2], vec![x0.clone(), x1, x0]).unwrap();
    let rep = feasibility_report(&model, &log, &TerrainModel::flat(0.0), &FeasibilityTolerances::default()).unwrap();
    assert!((rep.max_penetration[1] - 0.02).abs() < 1e-12);
    assert_eq!(rep.max_penetration[0], 0.0);
    assert_eq!(rep.slip_distance, vec![0.0; 4]);
    assert!((rep.worst_penetration() - 0.02).abs() < 1e-12);
}

#[test]
fn feasibility_measures_slide_distance() {
    let (mu, g, h, v0) = (0.5, 9.81, 0.01, 1.0);
    let model = point_mass_model(1.0, mu, 1).unwrap();
    let x0 = point_mass_state(&model, &[Vector3::zeros()], &[Vector3::new(v0, 0.0, 0.0)]).unwrap();
    let u = DVector::zeros(model.n_u);
    let log = rollout(
        &model,
        &TerrainModel::flat(0.0),
        &x0,
        &mut ConstantPolicy(u),
        h,
        40,
        &ContactMode::default(),
    )
    .unwrap();
    let rep = feasibility_report(&model, &log, &TerrainModel::flat(0.0), &FeasibilityTolerances::default()).unwrap();
    // Discrete kinetic friction: v_{k+1} = v_k - mu g h, x_{k+1} = x_k + h v_{k+1}.
    let mut expected = 0.0;
    let mut v: f64 = v0;
    for _ in 0..40 {
        v = (v - mu * g * h).max(0.0);
        expected += h * v;
    }
    assert!((rep.slip_distance[0] - expected).abs() < 1e-8, "{} vs {expected}", rep.slip_distance[0]);
}

#[test]
fn feasibility_counts_bound_violations() {
    let (model, x0, _) = stance();
    let mut log = RolloutLog::kinematic(vec![0.0, 0.1], vec![x0.clone(), x0]).unwrap();
    let mut u = DVector::zeros(model.n_u);
    u[0] = model.u_max[0] + 2.0;
    u[1] = model.u_min[1] - 0.5;
    log.controls.push(u);
    let rep = feasibility_report(&model, &log, &TerrainModel::flat(0.0), &FeasibilityTolerances::default()).unwrap();
    assert_eq!(rep.control_violations, 2);
    assert!((rep.max_control_violation - 2.0).abs() < 1e-12);
}

#[test]
fn kinematic_log_rejects_bad_times() {
    let (_, x0, _) = stance();
    assert!(RolloutLog::kinematic(vec![0.0, 0.0], vec![x0.clone(), x0.clone()]).is_err());
    assert!(RolloutLog::kinematic(vec![0.0], vec![x0.clone(), x0]).is_err());
}

#[test]
fn csv_export_has_one_row_per_state() {
    let (model, x0, u) = stance();
    let log = rollout(
        &model,
        &TerrainModel::flat(0.0),
        &x0,
        &mut ConstantPolicy(u),
        0.01,
        5,
        &ContactMode::default(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    log.write_csv(&model, &path).unwrap();
    let mut r = csv::Reader::from_path(&path).unwrap();
    let header = r.headers().unwrap().clone();
    assert_eq!(header.len(), 1 + model.n_q + model.n_v + model.n_u + 5 * model.n_contacts() + 1);
    let rows: Vec<_> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    let t: f64 = rows[5][0].parse().unwrap();
    assert!((t - 0.05).abs() < 1e-12);
}

#[test]
fn floated_reference_costs_more_than_grounded() {
    let (model, x0, _) = stance();
    let terrain = TerrainModel::flat(0.0);
    let n = 30;
    let h = 0.01;
    let grounded: Vec<DVector<f64>> = (0..=n).map(|_| x0.q.clone()).collect();
    let floated: Vec<DVector<f64>> = grounded
        .iter()
        .map(|q| {
            let mut q = q.clone();
            for k in (0..model.n_q).filter(|k| {
                model.limb_layouts().iter().any(|l| *k == l.q + 2) || *k == 2
            }) {
                q[k] += 0.3;
            }
            q
        })
        .collect();
    let cost = |refq: &Vec<DVector<f64>>| {
        let mut start = x0.clone();
        start.q = refq[0].clone();
        let mut pol = pd_tracking_policy(&model, refq.clone(), None, &PdGains::default(), h).unwrap();
        let log = rollout(&model, &terrain, &start, &mut pol, h, n, &ContactMode::default()).unwrap();
        assert_eq!(log.steps(), n);
        let q: Vec<DVector<f64>> = log.states.iter().map(|s| s.q.clone()).collect();
        physics_rollout_cost(&q, refq).unwrap()
    };
    assert!(cost(&floated) > cost(&grounded));
}

#[test]
fn contact_mode_serde() {
    let m: ContactMode = serde_json::from_str(r#"{"type":"spring_damper","k":1000.0,"b":10.0}"#).unwrap();
    assert_eq!(m, ContactMode::SpringDamper { k: 1000.0, b: 10.0 });
    let d: ContactMode = serde_json::from_str(r#"{"type":"ncp"}"#).unwrap();
    assert_eq!(d, ContactMode::default());
}
