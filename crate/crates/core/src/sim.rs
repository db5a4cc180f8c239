//! Open- and closed-loop roll-outs through the contact dynamics.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::contact::{step_ncp, step_spring_damper, ContactForce, RelaxationSchedule};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, State};
use crate::terrain::TerrainModel;
use crate::util::seg3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContactMode {
    Ncp {
        #[serde(default)]
        schedule: RelaxationSchedule,
    },
    SpringDamper {
        k: f64,
        b: f64,
    },
}

impl Default for ContactMode {
    fn default() -> Self {
        ContactMode::Ncp {
            schedule: RelaxationSchedule::default(),
        }
    }
}

/// Maps `(t, state)` to a control.
pub trait Policy {
    fn control(&mut self, t: f64, state: &State) -> DVector<f64>;
}

impl<F: FnMut(f64, &State) -> DVector<f64>> Policy for F {
    fn control(&mut self, t: f64, state: &State) -> DVector<f64> {
        self(t, state)
    }
}

/// Holds one control forever.
#[derive(Clone, Debug)]
pub struct ConstantPolicy(pub DVector<f64>);

impl Policy for ConstantPolicy {
    fn control(&mut self, _t: f64, _state: &State) -> DVector<f64> {
        self.0.clone()
    }
}

/// `times` and `states` have one entry per visited state; `controls`,
/// `forces` and `residuals` have one entry per step, or are empty for purely
/// kinematic logs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutLog {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    #[serde(with = "crate::util::serde_dvec_seq")]
    pub controls: Vec<DVector<f64>>,
    pub forces: Vec<Vec<ContactForce>>,
    pub residuals: Vec<f64>,
    pub events: Vec<String>,
}

impl RolloutLog {
    /// Log of a state sequence without dynamics information.
    pub fn kinematic(times: Vec<f64>, states: Vec<State>) -> Result<Self> {
        if times.len() != states.len() {
            return Err(Error::dim("times", states.len(), times.len()));
        }
        if let Some(i) = (1..times.len()).find(|&i| !(times[i] > times[i - 1])) {
            return Err(Error::NonMonotoneTimes { index: i, time: times[i] });
        }
        Ok(RolloutLog {
            times,
            states,
            ..Default::default()
        })
    }

    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    /// One row per state: time, q, v, then the control, contact forces and
    /// residual of the step that produced the state (blank on the first row).
    pub fn write_csv(&self, model: &ModelSpec, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((0..model.n_q).map(|i| format!("q{i}")));
        header.extend((0..model.n_v).map(|i| format!("v{i}")));
        header.extend((0..model.n_u).map(|i| format!("u{i}")));
        for name in model.contact_names() {
            header.push(format!("{name}_fn"));
            header.extend((0..4).map(|k| format!("{name}_ft{k}")));
        }
        header.push("residual".into());
        w.write_record(&header)?;
        let n_force = 5 * model.n_contacts();
        for (k, (t, s)) in self.times.iter().zip(&self.states).enumerate() {
            let mut row = vec![fmt(*t)];
            row.extend(s.q.iter().chain(s.v.iter()).map(|x| fmt(*x)));
            match (k.checked_sub(1).and_then(|j| self.controls.get(j)), k.checked_sub(1).and_then(|j| self.forces.get(j))) {
                (Some(u), Some(f)) => {
                    row.extend(u.iter().map(|x| fmt(*x)));
                    for c in f {
                        row.push(fmt(c.normal));
                        row.extend(c.tangential.iter().map(|x| fmt(*x)));
                    }
                    row.push(fmt(self.residuals[k - 1]));
                }
                _ => row.extend(std::iter::repeat_n(String::new(), model.n_u + n_force + 1)),
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn fmt(x: f64) -> String {
    format!("{x:.12e}")
}

/// Steps `policy` through the contact dynamics. A failed step ends the
/// log early with an event instead of an error.
pub fn rollout(
    model: &ModelSpec,
    terrain: &TerrainModel,
    x0: &State,
    policy: &mut dyn Policy,
    h: f64,
    n_steps: usize,
    contact: &ContactMode,
) -> Result<RolloutLog> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps", "must be >= 1"));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("h", "must be > 0"));
    }
    model.check_state(x0)?;
    let mut log = RolloutLog {
        times: vec![0.0],
        states: vec![x0.clone()],
        ..Default::default()
    };
    let mut x = x0.clone();
    for k in 0..n_steps {
        let t = k as f64 * h;
        let u = policy.control(t, &x);
        let step = match contact {
            ContactMode::Ncp { schedule } => {
                step_ncp(model, terrain, h, &x, &u, schedule).map(|r| (r.next_state, r.forces, r.residual))
            }
            ContactMode::SpringDamper { k: stiff, b } => step_spring_damper(model, terrain, h, &x, &u, *stiff, *b)
                .map(|s| (s, vec![ContactForce::default(); model.n_contacts()], 0.0)),
        };
        match step {
            Ok((next, forces, residual)) => {
                log.times.push((k + 1) as f64 * h);
                log.states.push(next.clone());
                log.controls.push(u);
                log.forces.push(forces);
                log.residuals.push(residual);
                x = next;
            }
            Err(e) => {
                log.events.push(format!("step {k} at t = {t}: {e}"));
                break;
            }
        }
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PdGains {
    /// N/m per coordinate.
    pub kp: f64,
    /// N s/m per coordinate.
    pub kd: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        PdGains { kp: 500.0, kd: 20.0 }
    }
}

impl PdGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.kp >= 0.0 && self.kp.is_finite()) {
            return Err(Error::invalid("kp", "must be >= 0"));
        }
        if !(self.kd >= 0.0 && self.kd.is_finite()) {
            return Err(Error::invalid("kd", "must be >= 0"));
        }
        Ok(())
    }
}

/// PD tracking of a configuration sequence sampled every `dt`.
///
/// Each limb channel gets `kp (p_d - p) + kd (v_d - v)` on its own
/// coordinates. The body's PD force is produced by the limbs' reaction, so
/// it is split equally over the limbs with a negative sign. No gravity
/// feed-forward unless one is attached.
#[derive(Clone, Debug)]
pub struct PdPolicy {
    model: ModelSpec,
    targets: Vec<DVector<f64>>,
    target_velocities: Option<Vec<DVector<f64>>>,
    gains: PdGains,
    dt: f64,
    feedforward: Option<DVector<f64>>,
}

impl PdPolicy {
    pub fn with_feedforward(mut self, u: DVector<f64>) -> Self {
        self.feedforward = Some(u);
        self
    }

    fn index(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.targets.len() - 1)
    }

    /// Control before clipping.
    pub fn raw_control(&self, t: f64, state: &State) -> DVector<f64> {
        let i = self.index(t);
        let q_d = &self.targets[i];
        let zero = DVector::zeros(self.model.n_v);
        let v_d = self.target_velocities.as_ref().map_or(&zero, |v| &v[i]);
        let e = |a: usize| {
            (seg3(q_d, a) - seg3(&state.q, a)) * self.gains.kp + (seg3(v_d, a) - seg3(&state.v, a)) * self.gains.kd
        };
        let mut u = self.feedforward.clone().unwrap_or_else(|| DVector::zeros(self.model.n_u));
        let body = e(0) / self.model.limbs.len() as f64;
        for lay in self.model.limb_layouts() {
            let f = e(lay.q) - body;
            for k in 0..3 {
                u[lay.u + k] += f[k];
            }
            if lay.dofs == 6 {
                let tau = e(lay.q + 3);
                for k in 0..3 {
                    u[lay.u + 3 + k] += tau[k];
                }
            }
        }
        u
    }
}

impl Policy for PdPolicy {
    fn control(&mut self, t: f64, state: &State) -> DVector<f64> {
        self.model.clamp_control(&self.raw_control(t, state))
    }
}

pub fn pd_tracking_policy(
    model: &ModelSpec,
    q_d: Vec<DVector<f64>>,
    v_d: Option<Vec<DVector<f64>>>,
    gains: &PdGains,
    dt: f64,
) -> Result<PdPolicy> {
    gains.validate()?;
    if q_d.is_empty() {
        return Err(Error::invalid("q_d", "must be non-empty"));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", "must be > 0"));
    }
    if let Some(q) = q_d.iter().find(|q| q.len() != model.n_q) {
        return Err(Error::dim("q_d", model.n_q, q.len()));
    }
    if let Some(v) = &v_d {
        if v.len() != q_d.len() {
            return Err(Error::dim("v_d", q_d.len(), v.len()));
        }
        if let Some(x) = v.iter().find(|x| x.len() != model.n_v) {
            return Err(Error::dim("v_d", model.n_v, x.len()));
        }
    }
    Ok(PdPolicy {
        model: model.clone(),
        targets: q_d,
        target_velocities: v_d,
        gains: gains.clone(),
        dt,
        feedforward: None,
    })
}

/// `sum_t |q(t) - q_d(t)|^2`, m^2 (angles weighted 1).
pub fn physics_rollout_cost(q_tracked: &[DVector<f64>], q_d: &[DVector<f64>]) -> Result<f64> {
    if q_tracked.len() != q_d.len() {
        return Err(Error::dim("q_tracked", q_d.len(), q_tracked.len()));
    }
    let mut total = 0.0;
    for (a, b) in q_tracked.iter().zip(q_d) {
        if a.len() != b.len() {
            return Err(Error::dim("configuration", b.len(), a.len()));
        }
        total += (a - b).norm_squared();
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeasibilityTolerances {
    /// A contact counts as loaded when its normal force exceeds this
    /// fraction of the total weight.
    pub slip_force_fraction: f64,
}

impl Default for FeasibilityTolerances {
    fn default() -> Self {
        FeasibilityTolerances { slip_force_fraction: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub contact_names: Vec<String>,
    /// Per contact, m.
    pub max_penetration: Vec<f64>,
    /// Per contact: tangential travel during loaded steps, m.
    pub slip_distance: Vec<f64>,
    pub control_violations: usize,
    pub max_control_violation: f64,
}

impl FeasibilityReport {
    pub fn worst_penetration(&self) -> f64 {
        self.max_penetration.iter().copied().fold(0.0, f64::max)
    }
}

pub fn feasibility_report(
    model: &ModelSpec,
    log: &RolloutLog,
    terrain: &TerrainModel,
    tolerances: &FeasibilityTolerances,
) -> Result<FeasibilityReport> {
    let nc = model.n_contacts();
    let mut max_penetration = vec![0.0_f64; nc];
    let mut slip_distance = vec![0.0; nc];
    let mut points = Vec::with_capacity(log.states.len());
    for s in &log.states {
        model.check_state(s)?;
        let pts = model.contact_points(&s.q);
        for (c, p) in pts.iter().enumerate() {
            max_penetration[c] = max_penetration[c].max(-terrain.signed_distance(&p.position));
        }
        points.push(pts);
    }
    let threshold = tolerances.slip_force_fraction * model.weight();
    for (k, forces) in log.forces.iter().enumerate() {
        for (c, f) in forces.iter().enumerate() {
            if f.normal > threshold {
                let a = points[k][c].position;
                let b = points[k + 1][c].position;
                let n = terrain.surface_normal(&a);
                let d = b - a;
                slip_distance[c] += (d - n * n.dot(&d)).norm();
            }
        }
    }
    let mut control_violations = 0;
    let mut max_control_violation: f64 = 0.0;
    for u in &log.controls {
        for k in 0..model.n_u.min(u.len()) {
            let excess = (u[k] - model.u_max[k]).max(model.u_min[k] - u[k]);
            if excess > 0.0 {
                control_violations += 1;
                max_control_violation = max_control_violation.max(excess);
            }
        }
    }
    Ok(FeasibilityReport {
        contact_names: model.contact_names(),
        max_penetration,
        slip_distance,
        control_violations,
        max_control_violation,
    })
}

/// Tracks a state sequence by asking the supporting limbs for the body
/// wrench a PD law on the body pose wants, while the other limbs follow
/// their own targets. A limb supports when its target is within
/// `support_gap` of the ground; supporting limbs share the wrench through
/// ground reactions kept inside the friction pyramid.
#[derive(Clone, Debug)]
pub struct WrenchTrackingPolicy {
    model: ModelSpec,
    terrain: TerrainModel,
    targets: Vec<State>,
    dt: f64,
    /// 1/s^2 and 1/s, per unit mass or inertia. Defaults depend on `dt`.
    pub body_gains: (f64, f64),
    pub limb_gains: (f64, f64),
    pub support_gap: f64,
}

impl WrenchTrackingPolicy {
    pub fn new(model: &ModelSpec, terrain: &TerrainModel, targets: Vec<State>, dt: f64) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::invalid("targets", "must be non-empty"));
        }
        if !(dt > 0.0) {
            return Err(Error::invalid("dt", "must be > 0"));
        }
        for s in &targets {
            model.check_state(s)?;
        }
        // Stiffness capped so that kp dt^2 <= 1/4 keeps the discrete loop
        // well inside its stability region.
        let kp = (0.25 / (dt * dt)).min(100.0);
        Ok(WrenchTrackingPolicy {
            model: model.clone(),
            terrain: terrain.clone(),
            targets,
            dt,
            body_gains: (kp, 2.0 * kp.sqrt()),
            limb_gains: (kp, 1.5 * kp.sqrt()),
            support_gap: 0.01,
        })
    }

    fn raw_control(&self, t: f64, x: &State) -> DVector<f64> {
        use crate::mrp;
        use crate::util::{mat3, set3};
        use nalgebra::{DMatrix, Vector3};

        let m = &self.model;
        let i = ((t / self.dt).round().max(0.0) as usize).min(self.targets.len() - 1);
        let target = &self.targets[i];
        let g = m.gravity();
        let pb = seg3(&x.q, 0);
        let rot = mrp::rotation(&seg3(&x.q, 3));
        let (kp, kd) = self.body_gains;
        let (lkp, lkd) = self.limb_gains;
        let acc = (seg3(&target.q, 0) - pb) * kp + (seg3(&target.v, 0) - seg3(&x.v, 0)) * kd;
        let alpha = (seg3(&target.q, 3) - seg3(&x.q, 3)) * (4.0 * kp) + (seg3(&target.v, 3) - seg3(&x.v, 3)) * kd;
        // Wrench the limbs must exert on the body (force, world torque).
        let mut force = (acc - g) * m.body_mass;
        let mut torque = rot * (mat3(&m.body_inertia) * alpha);
        let pts = m.contact_points(&x.q);
        let target_pts = m.contact_points(&target.q);
        let mut u = DVector::zeros(m.n_u);
        // Supporting limbs with the current positions of their grounded
        // contact points.
        let mut support: Vec<(usize, Vec<Vector3<f64>>)> = vec![];
        for (l, (limb, lay)) in m.limbs.iter().zip(m.limb_layouts()).enumerate() {
            let p = seg3(&x.q, lay.q);
            let grounded: Vec<Vector3<f64>> = pts
                .iter()
                .zip(&target_pts)
                .filter(|(c, ct)| c.limb == l && self.terrain.signed_distance(&ct.position) < self.support_gap)
                .map(|(c, _)| c.position)
                .collect();
            if lay.dofs == 6 {
                let j = mat3(limb.inertia.as_ref().expect("rigid limb"));
                let rf = mrp::rotation(&seg3(&x.q, lay.q + 3));
                let a = (seg3(&target.q, lay.q + 3) - seg3(&x.q, lay.q + 3)) * (4.0 * lkp)
                    + (seg3(&target.v, lay.q + 3) - seg3(&x.v, lay.q + 3)) * lkd;
                let tau = rf * (j * a);
                set3(&mut u, lay.u + 3, &tau);
                torque += tau;
            }
            if !grounded.is_empty() {
                let mg = g * limb.limb_mass;
                force -= mg;
                torque -= (p - pb).cross(&mg);
                support.push((l, grounded));
            } else {
                let a = (seg3(&target.q, lay.q) - p) * lkp + (seg3(&target.v, lay.q) - seg3(&x.v, lay.q)) * lkd;
                let f = (a - g) * limb.limb_mass;
                set3(&mut u, lay.u, &f);
                // Body sees -f at the limb.
                force -= -f;
                torque -= (p - pb).cross(&-f);
            }
        }
        let n: usize = support.iter().map(|(_, c)| c.len()).sum();
        if n > 0 {
            // Ground reactions at the grounded points, as nonnegative
            // combinations of friction-pyramid edges. A limb held still by
            // the ground passes them, plus its weight, on to the body.
            let mu = m.friction_coefficient;
            let n_hat = self.terrain.surface_normal(&pb);
            let (t1, t2) = self.terrain.tangent_basis(&pb);
            let edges: Vec<Vector3<f64>> = [t1, -t1, t2, -t2].iter().map(|t| n_hat + t * mu).collect();
            let mut a = DMatrix::zeros(6, 4 * n);
            let mut col = 0;
            for (_, cs) in &support {
                for c in cs {
                    for e in &edges {
                        a.view_mut((0, col), (3, 1)).copy_from(e);
                        a.view_mut((3, col), (3, 1)).copy_from(&(c - pb).cross(e));
                        col += 1;
                    }
                }
            }
            let b = DVector::from_vec(vec![force.x, force.y, force.z, torque.x, torque.y, torque.z]);
            // Vertical support and attitude first; a stance that cannot
            // hold both gives up horizontal body force.
            let w = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 10.0, 1e3, 1e3, 1e3]));
            let hess = a.transpose() * &w * &a + DMatrix::identity(4 * n, 4 * n) * 1e-6;
            let grad = -(a.transpose() * &w * b);
            let lo = DVector::zeros(4 * n);
            let hi = DVector::from_element(4 * n, f64::INFINITY);
            if let Some(sol) = crate::trajopt::box_qp(&hess, &grad, &lo, &hi, &DVector::zeros(4 * n)) {
                let mut col = 0;
                for (l, cs) in &support {
                    let lay = &m.limb_layouts()[*l];
                    let p = seg3(&x.q, lay.q);
                    let mut f = -g * m.limbs[*l].limb_mass;
                    let mut tau = Vector3::zeros();
                    for c in cs {
                        let ground: Vector3<f64> = a.fixed_view::<3, 4>(0, col) * sol.x.fixed_rows::<4>(col);
                        f -= ground;
                        tau -= (c - p).cross(&ground);
                        col += 4;
                    }
                    set3(&mut u, lay.u, &f);
                    if lay.dofs == 6 {
                        let tau = seg3(&u, lay.u + 3) + tau;
                        set3(&mut u, lay.u + 3, &tau);
                    }
                }
            }
        }
        u
    }
}

impl Policy for WrenchTrackingPolicy {
    fn control(&mut self, t: f64, state: &State) -> DVector<f64> {
        self.model.clamp_control(&self.raw_control(t, state))
    }
}
