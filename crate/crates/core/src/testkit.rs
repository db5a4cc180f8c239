//! Oracles, generators and closed-form fixtures shared by the test suites.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::contact::{contact_mode_oracle, step_ncp, step_spring_damper, RelaxationSchedule, StepResult};
use crate::error::{Error, Result};
use crate::model::{build_quadruped, LimbSpec, ModelSpec, QuadrupedParams, State, StateParts, pack_state};
use crate::terrain::TerrainModel;
use crate::trajopt::ReferenceTrajectory;

pub use crate::retarget::synthetic::{generate_synthetic_keypoints, Pattern, SyntheticParams};

/// Central-difference Jacobian of `f` at `x`. The step for coordinate `i`
/// is `step * max(1, |x_i|)`.
pub fn finite_difference_jacobian<F>(f: F, x: &DVector<f64>, step: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let f0 = f(x);
    let mut jac = DMatrix::zeros(f0.len(), x.len());
    for i in 0..x.len() {
        let e = step * x[i].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += e;
        xm[i] -= e;
        jac.set_column(i, &((f(&xp) - f(&xm)) / (2.0 * e)));
    }
    jac
}

pub const FD_STEP: f64 = 1e-6;

/// A body carrying `points` translational limbs of mass `limb_mass`, each
/// with one contact point, spaced 0.2 m apart along y.
pub fn point_mass_model(limb_mass: f64, mu: f64, points: usize) -> Result<ModelSpec> {
    if points == 0 {
        return Err(Error::invalid("points", "must be >= 1"));
    }
    let limbs: Vec<LimbSpec> = (0..points)
        .map(|i| LimbSpec {
            name: format!("p{i}"),
            limb_mass,
            inertia: None,
            contact_offsets: vec![[0.0; 3]],
            contact_names: vec![],
            reach_max: 1.0,
            nominal_offset: [0.0, 0.2 * i as f64 - 0.1 * (points - 1) as f64, -0.5],
        })
        .collect();
    let n_u = 3 * points;
    let model = ModelSpec {
        name: "point_masses".into(),
        body_mass: 1.0,
        body_inertia: [[0.01, 0.0, 0.0], [0.0, 0.01, 0.0], [0.0, 0.0, 0.01]],
        limbs,
        n_q: 6 + n_u,
        n_v: 6 + n_u,
        n_u,
        u_min: vec![-100.0; n_u],
        u_max: vec![100.0; n_u],
        gravity: crate::model::DEFAULT_GRAVITY,
        friction_coefficient: mu,
        nominal_height: 0.5,
    };
    model.validate()?;
    Ok(model)
}

/// State of a [`point_mass_model`] with limb `i` at `positions[i]` moving
/// with `velocities[i]`; the body sits 0.5 m above the first point.
pub fn point_mass_state(model: &ModelSpec, positions: &[Vector3<f64>], velocities: &[Vector3<f64>]) -> Result<State> {
    let mut parts = StateParts::zeros(model);
    if positions.len() != parts.limbs.len() || velocities.len() != parts.limbs.len() {
        return Err(Error::dim("points", parts.limbs.len(), positions.len()));
    }
    parts.body_position = positions[0] + Vector3::new(0.0, 0.0, 0.5);
    for ((l, p), v) in parts.limbs.iter_mut().zip(positions).zip(velocities) {
        l.position = *p;
        l.velocity = *v;
    }
    pack_state(model, &parts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Paper,
    Trivial,
    Derived,
}

/// What a fixture measures from its roll-out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    /// Time at which limb 0 first reaches the ground, interpolated inside
    /// the first loaded step.
    TouchdownTime,
    /// Normal impulse `lambda_n h` on limb 0 in the first step.
    ImpactImpulse,
    /// Distance limb 0 travels along x until it stops.
    SlideDistance,
    /// Normal force of every contact after one step.
    NormalForces,
    /// Steady penetration depth `-phi` of limb 0 under the spring model.
    SpringPenetration { k: f64, b: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixtureCase {
    pub description: String,
    pub model: ModelSpec,
    pub terrain: TerrainModel,
    pub state: State,
    #[serde(with = "crate::util::serde_dvec")]
    pub control: DVector<f64>,
    pub h: f64,
    /// Upper bound on the number of steps the measurement may take.
    pub max_steps: usize,
    pub kind: FixtureKind,
    pub expected: Vec<f64>,
    /// Relative tolerance.
    pub tolerance: f64,
    pub provenance: Provenance,
    /// The closed form the expected value comes from.
    pub oracle: String,
}

/// Which contact step a fixture is run against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stepper {
    Ncp,
    Oracle,
}

pub fn closed_form_fixtures() -> Result<Vec<FixtureCase>> {
    let g = 9.81;
    let flat = TerrainModel::flat(0.0);
    let one = point_mass_model(1.0, 0.5, 1)?;
    let zero = DVector::zeros(one.n_u);
    let mut out = vec![];

    let z0 = 0.05;
    let h = 1e-5;
    out.push(FixtureCase {
        description: "point mass dropped from 0.05 m touches down at sqrt(2 z0 / g)".into(),
        model: one.clone(),
        terrain: flat.clone(),
        state: point_mass_state(&one, &[Vector3::new(0.0, 0.0, z0)], &[Vector3::zeros()])?,
        control: zero.clone(),
        h,
        max_steps: ((2.0 * z0 / g).sqrt() / h) as usize + 100,
        kind: FixtureKind::TouchdownTime,
        expected: vec![(2.0 * z0 / g).sqrt()],
        tolerance: 1e-4,
        provenance: Provenance::Derived,
        oracle: "free fall: t = sqrt(2 z0 / g)".into(),
    });

    let v0 = 1.0;
    let h = 0.01;
    out.push(FixtureCase {
        description: "point mass hitting the ground at 1 m/s stops within one step".into(),
        model: one.clone(),
        terrain: flat.clone(),
        state: point_mass_state(&one, &[Vector3::zeros()], &[Vector3::new(0.0, 0.0, -v0)])?,
        control: zero.clone(),
        h,
        max_steps: 1,
        kind: FixtureKind::ImpactImpulse,
        expected: vec![1.0 * (v0 + g * h)],
        tolerance: 1e-4,
        provenance: Provenance::Derived,
        oracle: "inelastic impact momentum balance: P = m (v0 + g h)".into(),
    });

    let mu = 0.5;
    let h = 1e-5;
    out.push(FixtureCase {
        description: "point mass sliding at 1 m/s with mu = 0.5 stops after v^2 / (2 mu g)".into(),
        model: one.clone(),
        terrain: flat.clone(),
        state: point_mass_state(&one, &[Vector3::zeros()], &[Vector3::new(v0, 0.0, 0.0)])?,
        control: zero.clone(),
        h,
        max_steps: (v0 / (mu * g * h)) as usize + 100,
        kind: FixtureKind::SlideDistance,
        expected: vec![v0 * v0 / (2.0 * mu * g)],
        tolerance: 1e-4,
        provenance: Provenance::Derived,
        oracle: "kinetic friction: d = v^2 / (2 mu g)".into(),
    });

    let quad = build_quadruped(&QuadrupedParams::default())?;
    let stance = quad.nominal_state(Vector3::new(0.0, 0.0, quad.nominal_height));
    let u = quad.gravity_compensation(&[true; 4]);
    let per_foot = quad.weight() / 4.0;
    out.push(FixtureCase {
        description: "symmetric four-foot stance shares the weight equally".into(),
        model: quad.clone(),
        terrain: flat.clone(),
        state: stance,
        control: u,
        h: 0.01,
        max_steps: 1,
        kind: FixtureKind::NormalForces,
        expected: vec![per_foot; 4],
        tolerance: 1e-4,
        provenance: Provenance::Trivial,
        oracle: "symmetry: each foot carries total weight / 4".into(),
    });

    let (k, b) = (1e4, 100.0);
    out.push(FixtureCase {
        description: "1 kg point mass resting on a 1e4 N/m spring ground".into(),
        model: one.clone(),
        terrain: flat,
        state: point_mass_state(&one, &[Vector3::zeros()], &[Vector3::zeros()])?,
        control: zero,
        h: 1e-4,
        max_steps: 5000,
        kind: FixtureKind::SpringPenetration { k, b },
        expected: vec![1.0 * g / k],
        tolerance: 1e-4,
        provenance: Provenance::Derived,
        oracle: "spring statics: depth = m g / k".into(),
    });
    Ok(out)
}

fn contact_step(case: &FixtureCase, state: &State, stepper: Stepper) -> Result<StepResult> {
    match stepper {
        Stepper::Ncp => step_ncp(&case.model, &case.terrain, case.h, state, &case.control, &RelaxationSchedule::default()),
        Stepper::Oracle => contact_mode_oracle(&case.model, &case.terrain, case.h, state, &case.control),
    }
}

/// Runs a fixture and returns the measured values, comparable to
/// `case.expected`. Spring fixtures ignore `stepper`.
pub fn evaluate_fixture(case: &FixtureCase, stepper: Stepper) -> Result<Vec<f64>> {
    let limb0 = case.model.limb_layouts()[0].q;
    match &case.kind {
        FixtureKind::TouchdownTime => {
            let mut s = case.state.clone();
            for n in 0..case.max_steps {
                let r = contact_step(case, &s, stepper)?;
                if r.forces[0].normal > 0.0 {
                    // Height crosses zero within this step at the pre-impact speed.
                    let vz = s.v[limb0 + 2] + case.model.gravity()[2] * case.h;
                    let frac = s.q[limb0 + 2] / (-vz * case.h);
                    return Ok(vec![(n as f64 + frac) * case.h]);
                }
                s = r.next_state;
            }
            Err(Error::invalid("fixture", "no touchdown within max_steps"))
        }
        FixtureKind::ImpactImpulse => {
            let r = contact_step(case, &case.state, stepper)?;
            Ok(vec![r.forces[0].normal * case.h])
        }
        FixtureKind::SlideDistance => {
            let x0 = case.state.q[limb0];
            let mut s = case.state.clone();
            for _ in 0..case.max_steps {
                s = contact_step(case, &s, stepper)?.next_state;
                if s.v[limb0].abs() < 1e-12 {
                    return Ok(vec![s.q[limb0] - x0]);
                }
            }
            Err(Error::invalid("fixture", "slide did not stop within max_steps"))
        }
        FixtureKind::NormalForces => {
            let r = contact_step(case, &case.state, stepper)?;
            Ok(r.forces.iter().map(|f| f.normal).collect())
        }
        FixtureKind::SpringPenetration { k, b } => {
            let mut s = case.state.clone();
            for _ in 0..case.max_steps {
                s = step_spring_damper(&case.model, &case.terrain, case.h, &s, &case.control, *k, *b)?;
            }
            Ok(vec![-case.terrain.signed_distance(&s.q.fixed_rows::<3>(limb0).into_owned())])
        }
    }
}

/// A quadruped-style standing reference: the nominal stance on `terrain`
/// held by gravity compensation and stepped with the exact contact step,
/// so consecutive states are consistent with the dynamics.
pub fn standing_reference(model: &ModelSpec, terrain: &TerrainModel, h: f64, steps: usize) -> Result<ReferenceTrajectory> {
    if steps == 0 {
        return Err(Error::invalid("steps", "must be >= 1"));
    }
    let ground = terrain.height(0.0, 0.0);
    let x0 = model.nominal_state(Vector3::new(0.0, 0.0, ground + model.nominal_height));
    let u = model.gravity_compensation(&vec![true; model.limbs.len()]);
    let schedule = RelaxationSchedule::default();
    let mut states = vec![x0];
    let mut forces = vec![];
    for _ in 0..steps {
        let r = step_ncp(model, terrain, h, states.last().expect("non-empty"), &u, &schedule)?;
        states.push(r.next_state);
        forces.push(r.forces);
    }
    let mut out = ReferenceTrajectory::from_states(model, states, h)?;
    out.controls = vec![u; steps];
    out.forces = forces;
    Ok(out)
}
