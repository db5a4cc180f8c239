//! Point-foot floating-base models.
//!
//! Configuration layout: body position (3), body orientation as MRP (3), then
//! for each limb its world position (3) followed by its orientation (3) when
//! the limb is a rigid foot. Velocities mirror that layout with body-frame
//! angular rates. Controls are, per limb, an internal force (3) acting on the
//! limb and, for rigid feet, an internal torque (3); the body receives the
//! equal-and-opposite wrench at the limb position.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrp;
use crate::util::{add_block3, mat3, seg3, serde_dvec, set3, vec3};

pub const DEFAULT_GRAVITY: [f64; 3] = [0.0, 0.0, -9.81];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimbSpec {
    pub name: String,
    pub limb_mass: f64,
    /// Rotational inertia in the limb frame. Present only for rigid feet,
    /// which then carry an orientation and a torque channel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inertia: Option<[[f64; 3]; 3]>,
    pub contact_offsets: Vec<[f64; 3]>,
    #[serde(default)]
    pub contact_names: Vec<String>,
    pub reach_max: f64,
    /// Nominal limb position relative to the body origin, world-aligned.
    pub nominal_offset: [f64; 3],
}

impl LimbSpec {
    pub fn is_rigid(&self) -> bool {
        self.inertia.is_some()
    }

    pub fn dofs(&self) -> usize {
        if self.is_rigid() {
            6
        } else {
            3
        }
    }

    pub fn contact_name(&self, k: usize) -> String {
        match self.contact_names.get(k) {
            Some(n) => format!("{}_{}", self.name, n),
            None if self.contact_offsets.len() == 1 => self.name.clone(),
            None => format!("{}_{}", self.name, k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub body_mass: f64,
    pub body_inertia: [[f64; 3]; 3],
    pub limbs: Vec<LimbSpec>,
    pub n_q: usize,
    pub n_v: usize,
    pub n_u: usize,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    pub friction_coefficient: f64,
    /// Body height above flat ground in the nominal stance.
    pub nominal_height: f64,
}

fn default_gravity() -> [f64; 3] {
    DEFAULT_GRAVITY
}

/// Offsets of one limb inside the state and control vectors.
#[derive(Clone, Copy, Debug)]
pub struct LimbLayout {
    pub q: usize,
    pub u: usize,
    pub dofs: usize,
}

/// A contact point resolved in the world frame.
#[derive(Clone, Debug)]
pub struct ContactPoint {
    pub limb: usize,
    pub index: usize,
    pub position: Vector3<f64>,
}

impl ModelSpec {
    pub fn limb_layouts(&self) -> Vec<LimbLayout> {
        let mut q = 6;
        let mut u = 0;
        self.limbs
            .iter()
            .map(|l| {
                let out = LimbLayout { q, u, dofs: l.dofs() };
                q += l.dofs();
                u += l.dofs();
                out
            })
            .collect()
    }

    pub fn n_x(&self) -> usize {
        self.n_q + self.n_v
    }

    pub fn n_contacts(&self) -> usize {
        self.limbs.iter().map(|l| l.contact_offsets.len()).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.body_mass + self.limbs.iter().map(|l| l.limb_mass).sum::<f64>()
    }

    pub fn gravity(&self) -> Vector3<f64> {
        vec3(&self.gravity)
    }

    /// Total weight magnitude, N. Used to normalize forces.
    pub fn weight(&self) -> f64 {
        self.total_mass() * self.gravity().norm()
    }

    pub fn contact_names(&self) -> Vec<String> {
        self.limbs
            .iter()
            .flat_map(|l| (0..l.contact_offsets.len()).map(move |k| l.contact_name(k)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.body_mass > 0.0) {
            return Err(Error::invalid("body_mass", "must be > 0"));
        }
        let inertia = mat3(&self.body_inertia);
        check_inertia("body_inertia", &inertia)?;
        if self.limbs.is_empty() {
            return Err(Error::invalid("limbs", "at least one limb is required"));
        }
        for (i, l) in self.limbs.iter().enumerate() {
            let field = |f: &str| format!("limbs[{i}].{f}");
            if !(l.limb_mass > 0.0) {
                return Err(Error::invalid(field("limb_mass"), "must be > 0"));
            }
            if !(l.reach_max > 0.0) {
                return Err(Error::invalid(field("reach_max"), "must be > 0"));
            }
            if l.contact_offsets.is_empty() {
                return Err(Error::invalid(field("contact_offsets"), "must be non-empty"));
            }
            if let Some(j) = &l.inertia {
                check_inertia(&field("inertia"), &mat3(j))?;
            }
        }
        let n_q = 6 + self.limbs.iter().map(|l| l.dofs()).sum::<usize>();
        let n_u: usize = self.limbs.iter().map(|l| l.dofs()).sum();
        if self.n_q != n_q {
            return Err(Error::dim("n_q", n_q, self.n_q));
        }
        if self.n_v != n_q {
            return Err(Error::dim("n_v", n_q, self.n_v));
        }
        if self.n_u != n_u {
            return Err(Error::dim("n_u", n_u, self.n_u));
        }
        if self.u_min.len() != n_u {
            return Err(Error::dim("u_min", n_u, self.u_min.len()));
        }
        if self.u_max.len() != n_u {
            return Err(Error::dim("u_max", n_u, self.u_max.len()));
        }
        for k in 0..n_u {
            if !(self.u_min[k] < self.u_max[k]) {
                return Err(Error::invalid(format!("u_min[{k}]"), "must be < u_max"));
            }
        }
        if !(self.friction_coefficient >= 0.0) {
            return Err(Error::invalid("friction_coefficient", "must be >= 0"));
        }
        if self.gravity.iter().any(|g| !g.is_finite()) {
            return Err(Error::invalid("gravity", "must be finite"));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: ModelSpec = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn u_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_column_slice(&self.u_min),
            DVector::from_column_slice(&self.u_max),
        )
    }

    pub fn clamp_control(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |k, _| u[k].clamp(self.u_min[k], self.u_max[k]))
    }

    pub fn validate_control(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.n_u {
            return Err(Error::dim("control", self.n_u, u.len()));
        }
        for k in 0..self.n_u {
            if u[k] < self.u_min[k] || u[k] > self.u_max[k] {
                return Err(Error::invalid(format!("u[{k}]"), "outside control bounds"));
            }
        }
        Ok(())
    }

    pub fn check_state(&self, state: &State) -> Result<()> {
        if state.q.len() != self.n_q {
            return Err(Error::dim("q", self.n_q, state.q.len()));
        }
        if state.v.len() != self.n_v {
            return Err(Error::dim("v", self.n_v, state.v.len()));
        }
        Ok(())
    }

    /// World positions of every contact point, in limb order.
    pub fn contact_points(&self, q: &DVector<f64>) -> Vec<ContactPoint> {
        let mut out = Vec::with_capacity(self.n_contacts());
        for (i, (limb, lay)) in self.limbs.iter().zip(self.limb_layouts()).enumerate() {
            let p = seg3(q, lay.q);
            let rot = if limb.is_rigid() {
                mrp::rotation(&seg3(q, lay.q + 3))
            } else {
                Matrix3::identity()
            };
            for (k, off) in limb.contact_offsets.iter().enumerate() {
                out.push(ContactPoint {
                    limb: i,
                    index: k,
                    position: p + rot * vec3(off),
                });
            }
        }
        out
    }

    /// The nominal standing configuration with the body at `position`.
    pub fn nominal_state(&self, position: Vector3<f64>) -> State {
        let mut parts = StateParts::zeros(self);
        parts.body_position = position;
        for (limb, lp) in self.limbs.iter().zip(parts.limbs.iter_mut()) {
            lp.position = position + vec3(&limb.nominal_offset);
        }
        pack_state(self, &parts).expect("parts built from the model")
    }

    /// Static internal forces: limbs in the air hold their own weight, and
    /// the supporting limbs share the rest of the body load equally. Vertical
    /// forces only, so the moment balance holds for stances symmetric about
    /// the body origin.
    pub fn gravity_compensation(&self, supporting: &[bool]) -> DVector<f64> {
        let g = self.gravity();
        let n = supporting.iter().filter(|s| **s).count().max(1) as f64;
        let mut load = self.body_mass * g;
        let mut u = DVector::zeros(self.n_u);
        for (i, (limb, lay)) in self.limbs.iter().zip(self.limb_layouts()).enumerate() {
            if !supporting.get(i).copied().unwrap_or(false) {
                let f = -limb.limb_mass * g;
                set3(&mut u, lay.u, &f);
                load -= f;
            }
        }
        for (i, lay) in self.limb_layouts().iter().enumerate() {
            if supporting.get(i).copied().unwrap_or(false) {
                set3(&mut u, lay.u, &(load / n));
            }
        }
        u
    }
}

fn check_inertia(field: &str, m: &Matrix3<f64>) -> Result<()> {
    if (m - m.transpose()).norm() > 1e-12 * m.norm().max(1.0) {
        return Err(Error::invalid(field, "must be symmetric"));
    }
    if m.cholesky().is_none() {
        return Err(Error::invalid(field, "must be positive definite"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    #[serde(with = "serde_dvec")]
    pub q: DVector<f64>,
    #[serde(with = "serde_dvec")]
    pub v: DVector<f64>,
}

impl State {
    pub fn zeros(model: &ModelSpec) -> Self {
        State {
            q: DVector::zeros(model.n_q),
            v: DVector::zeros(model.n_v),
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.q.len() + self.v.len());
        x.rows_mut(0, self.q.len()).copy_from(&self.q);
        x.rows_mut(self.q.len(), self.v.len()).copy_from(&self.v);
        x
    }

    pub fn from_vector(model: &ModelSpec, x: &DVector<f64>) -> Result<Self> {
        if x.len() != model.n_x() {
            return Err(Error::dim("state vector", model.n_x(), x.len()));
        }
        Ok(State {
            q: x.rows(0, model.n_q).into_owned(),
            v: x.rows(model.n_q, model.n_v).into_owned(),
        })
    }

    pub fn body_position(&self) -> Vector3<f64> {
        seg3(&self.q, 0)
    }

    pub fn body_orientation(&self) -> Vector3<f64> {
        seg3(&self.q, 3)
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

/// Control vector: per-limb internal forces (and torques for rigid feet).
pub type Control = DVector<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct LimbStateParts {
    pub position: Vector3<f64>,
    pub orientation: Option<Vector3<f64>>,
    pub velocity: Vector3<f64>,
    pub angular_velocity: Option<Vector3<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateParts {
    pub body_position: Vector3<f64>,
    pub body_orientation: Vector3<f64>,
    pub body_velocity: Vector3<f64>,
    pub body_angular_velocity: Vector3<f64>,
    pub limbs: Vec<LimbStateParts>,
}

impl StateParts {
    pub fn zeros(model: &ModelSpec) -> Self {
        StateParts {
            body_position: Vector3::zeros(),
            body_orientation: Vector3::zeros(),
            body_velocity: Vector3::zeros(),
            body_angular_velocity: Vector3::zeros(),
            limbs: model
                .limbs
                .iter()
                .map(|l| LimbStateParts {
                    position: Vector3::zeros(),
                    orientation: l.is_rigid().then(Vector3::zeros),
                    velocity: Vector3::zeros(),
                    angular_velocity: l.is_rigid().then(Vector3::zeros),
                })
                .collect(),
        }
    }
}

pub fn pack_state(model: &ModelSpec, parts: &StateParts) -> Result<State> {
    if parts.limbs.len() != model.limbs.len() {
        return Err(Error::dim("limbs", model.limbs.len(), parts.limbs.len()));
    }
    let mut s = State::zeros(model);
    set3(&mut s.q, 0, &parts.body_position);
    set3(&mut s.q, 3, &parts.body_orientation);
    set3(&mut s.v, 0, &parts.body_velocity);
    set3(&mut s.v, 3, &parts.body_angular_velocity);
    for (i, ((limb, lay), lp)) in model
        .limbs
        .iter()
        .zip(model.limb_layouts())
        .zip(&parts.limbs)
        .enumerate()
    {
        set3(&mut s.q, lay.q, &lp.position);
        set3(&mut s.v, lay.q, &lp.velocity);
        match (limb.is_rigid(), lp.orientation, lp.angular_velocity) {
            (true, Some(o), Some(w)) => {
                set3(&mut s.q, lay.q + 3, &o);
                set3(&mut s.v, lay.q + 3, &w);
            }
            (false, None, None) => {}
            _ => {
                return Err(Error::invalid(
                    format!("limbs[{i}]"),
                    "orientation components must match the limb type",
                ))
            }
        }
    }
    Ok(s)
}

pub fn unpack_state(model: &ModelSpec, state: &State) -> Result<StateParts> {
    model.check_state(state)?;
    let (q, v) = (&state.q, &state.v);
    Ok(StateParts {
        body_position: seg3(q, 0),
        body_orientation: seg3(q, 3),
        body_velocity: seg3(v, 0),
        body_angular_velocity: seg3(v, 3),
        limbs: model
            .limbs
            .iter()
            .zip(model.limb_layouts())
            .map(|(l, lay)| LimbStateParts {
                position: seg3(q, lay.q),
                orientation: l.is_rigid().then(|| seg3(q, lay.q + 3)),
                velocity: seg3(v, lay.q),
                angular_velocity: l.is_rigid().then(|| seg3(v, lay.q + 3)),
            })
            .collect(),
    })
}

/// Contact-free velocity derivative.
pub fn smooth_dynamics(model: &ModelSpec, state: &State, u: &Control) -> Result<DVector<f64>> {
    model.check_state(state)?;
    if u.len() != model.n_u {
        return Err(Error::dim("control", model.n_u, u.len()));
    }
    Ok(smooth_dynamics_unchecked(model, &state.q, &state.v, u))
}

pub(crate) fn smooth_dynamics_unchecked(
    model: &ModelSpec,
    q: &DVector<f64>,
    v: &DVector<f64>,
    u: &DVector<f64>,
) -> DVector<f64> {
    let g = model.gravity();
    let pb = seg3(q, 0);
    let sigma = seg3(q, 3);
    let omega = seg3(v, 3);
    let inertia = mat3(&model.body_inertia);
    let mut a = DVector::zeros(model.n_v);
    let mut force_sum = Vector3::zeros();
    let mut torque = Vector3::zeros();
    for (limb, lay) in model.limbs.iter().zip(model.limb_layouts()) {
        let f = seg3(u, lay.u);
        let p = seg3(q, lay.q);
        force_sum += f;
        torque += (p - pb).cross(&-f);
        set3(&mut a, lay.q, &(f / limb.limb_mass + g));
        if let Some(j) = &limb.inertia {
            let j = mat3(j);
            let tau = seg3(u, lay.u + 3);
            torque -= tau;
            let w = seg3(v, lay.q + 3);
            let rf = mrp::rotation(&seg3(q, lay.q + 3));
            let wdot = j.try_inverse().expect("validated inertia")
                * (rf.transpose() * tau - w.cross(&(j * w)));
            set3(&mut a, lay.q + 3, &wdot);
        }
    }
    set3(&mut a, 0, &(-force_sum / model.body_mass + g));
    let r = mrp::rotation(&sigma);
    let wdot = inertia.try_inverse().expect("validated inertia")
        * (r.transpose() * torque - omega.cross(&(inertia * omega)));
    set3(&mut a, 3, &wdot);
    a
}

/// Analytic Jacobians of [`smooth_dynamics`]: `(d a / d x, d a / d u)` with
/// `x = (q, v)`.
pub fn smooth_dynamics_jacobian(
    model: &ModelSpec,
    state: &State,
    u: &Control,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    model.check_state(state)?;
    if u.len() != model.n_u {
        return Err(Error::dim("control", model.n_u, u.len()));
    }
    Ok(smooth_jacobian_unchecked(model, &state.q, &state.v, u))
}

pub(crate) fn smooth_jacobian_unchecked(
    model: &ModelSpec,
    q: &DVector<f64>,
    v: &DVector<f64>,
    u: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n_q = model.n_q;
    let mut ax = DMatrix::zeros(model.n_v, model.n_x());
    let mut au = DMatrix::zeros(model.n_v, model.n_u);
    let pb = seg3(q, 0);
    let sigma = seg3(q, 3);
    let omega = seg3(v, 3);
    let inertia = mat3(&model.body_inertia);
    let inertia_inv = inertia.try_inverse().expect("validated inertia");
    let r = mrp::rotation(&sigma);
    let rt = r.transpose();
    let eye = Matrix3::identity();

    // Body-frame torque y = R^T tau_w, with tau_w = sum f_i x (p_i - p_b) - sum tau_i.
    let mut torque = Vector3::zeros();
    let mut dtau_dpb = Matrix3::zeros();
    for (limb, lay) in model.limbs.iter().zip(model.limb_layouts()) {
        let f = seg3(u, lay.u);
        let p = seg3(q, lay.q);
        let fx = mrp::skew(&f);
        torque += f.cross(&(p - pb));
        dtau_dpb -= fx;
        // d(body accel)/d f_i
        add_block3(&mut au, 0, lay.u, &(-eye / model.body_mass));
        // angular: d/dp_i and d/df_i
        add_block3(&mut ax, 3, lay.q, &(inertia_inv * rt * fx));
        add_block3(&mut au, 3, lay.u, &(inertia_inv * rt * -mrp::skew(&(p - pb))));
        add_block3(&mut au, lay.q, lay.u, &(eye / limb.limb_mass));
        if let Some(j) = &limb.inertia {
            let j = mat3(j);
            let j_inv = j.try_inverse().expect("validated inertia");
            let tau = seg3(u, lay.u + 3);
            torque -= tau;
            add_block3(&mut au, 3, lay.u + 3, &(inertia_inv * rt * -eye));
            let sf = seg3(q, lay.q + 3);
            let w = seg3(v, lay.q + 3);
            let rf = mrp::rotation(&sf);
            add_block3(
                &mut ax,
                lay.q + 3,
                lay.q + 3,
                &(j_inv * mrp::rotate_transpose_jacobian(&sf, &tau)),
            );
            add_block3(
                &mut ax,
                lay.q + 3,
                n_q + lay.q + 3,
                &(-j_inv * (mrp::skew(&w) * j - mrp::skew(&(j * w)))),
            );
            add_block3(&mut au, lay.q + 3, lay.u + 3, &(j_inv * rf.transpose()));
        }
    }
    add_block3(&mut ax, 3, 0, &(inertia_inv * rt * dtau_dpb));
    add_block3(
        &mut ax,
        3,
        3,
        &(inertia_inv * mrp::rotate_transpose_jacobian(&sigma, &torque)),
    );
    add_block3(
        &mut ax,
        3,
        n_q + 3,
        &(-inertia_inv * (mrp::skew(&omega) * inertia - mrp::skew(&(inertia * omega)))),
    );
    (ax, au)
}

/// `q (+) h v`: positions advance by `h v`, orientations by the MRP
/// kinematics evaluated at the start of the step.
pub fn integrate_configuration(model: &ModelSpec, q: &DVector<f64>, v: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut out = q + v * h;
    for at in orientation_offsets(model) {
        let s = seg3(q, at);
        set3(&mut out, at, &mrp::integrate(&s, &seg3(v, at), h));
    }
    out
}

/// Jacobians of [`integrate_configuration`] w.r.t. `q`, `v` and `h`.
pub fn integrate_configuration_jacobian(
    model: &ModelSpec,
    q: &DVector<f64>,
    v: &DVector<f64>,
    h: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let n = model.n_q;
    let mut dq = DMatrix::identity(n, n);
    let mut dv = DMatrix::identity(n, n) * h;
    let mut dh = v.clone();
    for at in orientation_offsets(model) {
        let s = seg3(q, at);
        let w = seg3(v, at);
        add_block3(&mut dq, at, at, &(0.25 * h * mrp::kinematics_jacobian(&s, &w)));
        let b = mrp::kinematics(&s);
        for i in 0..3 {
            for j in 0..3 {
                dv[(at + i, at + j)] = 0.25 * h * b[(i, j)];
            }
        }
        set3(&mut dh, at, &(0.25 * b * w));
    }
    (dq, dv, dh)
}

/// Re-charts every orientation whose MRP norm exceeds one.
pub fn rechart_configuration(model: &ModelSpec, q: &mut DVector<f64>) {
    for at in orientation_offsets(model) {
        let s = seg3(q, at);
        set3(q, at, &mrp::rechart(&s));
    }
}

/// Configuration-vector offsets of every MRP triple (body first).
pub fn orientation_offsets(model: &ModelSpec) -> Vec<usize> {
    std::iter::once(3)
        .chain(
            model
                .limbs
                .iter()
                .zip(model.limb_layouts())
                .filter(|(l, _)| l.is_rigid())
                .map(|(_, lay)| lay.q + 3),
        )
        .collect()
}

/// Morphology overrides for [`build_quadruped`]. Defaults describe a
/// 12 kg trotting-size quadruped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadrupedParams {
    pub body_mass: f64,
    pub body_inertia: [f64; 3],
    pub limb_mass: f64,
    pub stance_half_length: f64,
    pub stance_half_width: f64,
    pub nominal_height: f64,
    pub reach_max: f64,
    pub friction_coefficient: f64,
    pub force_limit: f64,
}

impl Default for QuadrupedParams {
    fn default() -> Self {
        QuadrupedParams {
            body_mass: 12.0,
            body_inertia: [0.1, 0.25, 0.3],
            limb_mass: 0.2,
            stance_half_length: 0.19,
            stance_half_width: 0.13,
            nominal_height: 0.3,
            reach_max: 0.35,
            friction_coefficient: 0.5,
            force_limit: 150.0,
        }
    }
}

pub const QUADRUPED_LIMBS: [&str; 4] = ["front_left", "front_right", "rear_left", "rear_right"];

pub fn build_quadruped(params: &QuadrupedParams) -> Result<ModelSpec> {
    positive("body_mass", params.body_mass)?;
    positive("limb_mass", params.limb_mass)?;
    positive("reach_max", params.reach_max)?;
    positive("nominal_height", params.nominal_height)?;
    positive("force_limit", params.force_limit)?;
    for (k, i) in params.body_inertia.iter().enumerate() {
        positive(&format!("body_inertia[{k}]"), *i)?;
    }
    if !(params.friction_coefficient >= 0.0) {
        return Err(Error::invalid("friction_coefficient", "must be >= 0"));
    }
    let signs = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];
    let limbs = QUADRUPED_LIMBS
        .iter()
        .zip(signs)
        .map(|(name, (sx, sy))| LimbSpec {
            name: name.to_string(),
            limb_mass: params.limb_mass,
            inertia: None,
            contact_offsets: vec![[0.0; 3]],
            contact_names: vec![],
            reach_max: params.reach_max,
            nominal_offset: [
                sx * params.stance_half_length,
                sy * params.stance_half_width,
                -params.nominal_height,
            ],
        })
        .collect();
    let [ix, iy, iz] = params.body_inertia;
    let model = ModelSpec {
        name: "quadruped".into(),
        body_mass: params.body_mass,
        body_inertia: [[ix, 0.0, 0.0], [0.0, iy, 0.0], [0.0, 0.0, iz]],
        limbs,
        n_q: 18,
        n_v: 18,
        n_u: 12,
        u_min: vec![-params.force_limit; 12],
        u_max: vec![params.force_limit; 12],
        gravity: DEFAULT_GRAVITY,
        friction_coefficient: params.friction_coefficient,
        nominal_height: params.nominal_height,
    };
    model.validate()?;
    Ok(model)
}

/// Morphology overrides for [`build_humanoid`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HumanoidParams {
    pub body_mass: f64,
    pub body_inertia: [f64; 3],
    pub foot_mass: f64,
    /// Foot box dimensions (length, width, height), m; sets foot inertia.
    pub foot_size: [f64; 3],
    pub toe_offset: [f64; 3],
    pub heel_offset: [f64; 3],
    pub hand_mass: f64,
    pub hip_half_width: f64,
    pub shoulder_half_width: f64,
    pub hand_drop: f64,
    pub nominal_height: f64,
    pub leg_reach: f64,
    pub arm_reach: f64,
    pub friction_coefficient: f64,
    pub foot_force_limit: f64,
    pub foot_torque_limit: f64,
    pub hand_force_limit: f64,
}

impl Default for HumanoidParams {
    fn default() -> Self {
        HumanoidParams {
            body_mass: 45.0,
            body_inertia: [3.5, 3.0, 0.8],
            foot_mass: 1.0,
            foot_size: [0.22, 0.1, 0.05],
            toe_offset: [0.09, 0.0, 0.0],
            heel_offset: [-0.09, 0.0, 0.0],
            hand_mass: 0.5,
            hip_half_width: 0.1,
            shoulder_half_width: 0.25,
            hand_drop: 0.1,
            nominal_height: 0.9,
            leg_reach: 1.0,
            arm_reach: 0.8,
            friction_coefficient: 0.7,
            foot_force_limit: 600.0,
            foot_torque_limit: 60.0,
            hand_force_limit: 100.0,
        }
    }
}

pub const HUMANOID_LIMBS: [&str; 4] = ["left_foot", "right_foot", "left_hand", "right_hand"];

pub fn build_humanoid(params: &HumanoidParams) -> Result<ModelSpec> {
    positive("body_mass", params.body_mass)?;
    positive("foot_mass", params.foot_mass)?;
    positive("hand_mass", params.hand_mass)?;
    positive("leg_reach", params.leg_reach)?;
    positive("arm_reach", params.arm_reach)?;
    positive("nominal_height", params.nominal_height)?;
    for (k, i) in params.body_inertia.iter().enumerate() {
        positive(&format!("body_inertia[{k}]"), *i)?;
    }
    for (k, s) in params.foot_size.iter().enumerate() {
        positive(&format!("foot_size[{k}]"), *s)?;
    }
    positive("foot_force_limit", params.foot_force_limit)?;
    positive("foot_torque_limit", params.foot_torque_limit)?;
    positive("hand_force_limit", params.hand_force_limit)?;
    if !(params.friction_coefficient >= 0.0) {
        return Err(Error::invalid("friction_coefficient", "must be >= 0"));
    }
    let [l, w, hgt] = params.foot_size;
    let m = params.foot_mass;
    let foot_inertia = [
        [m * (w * w + hgt * hgt) / 12.0, 0.0, 0.0],
        [0.0, m * (l * l + hgt * hgt) / 12.0, 0.0],
        [0.0, 0.0, m * (l * l + w * w) / 12.0],
    ];
    let foot = |name: &str, y: f64| LimbSpec {
        name: name.into(),
        limb_mass: params.foot_mass,
        inertia: Some(foot_inertia),
        contact_offsets: vec![params.toe_offset, params.heel_offset],
        contact_names: vec!["toe".into(), "heel".into()],
        reach_max: params.leg_reach,
        nominal_offset: [0.0, y, -params.nominal_height],
    };
    let hand = |name: &str, y: f64| LimbSpec {
        name: name.into(),
        limb_mass: params.hand_mass,
        inertia: None,
        contact_offsets: vec![[0.0; 3]],
        contact_names: vec![],
        reach_max: params.arm_reach,
        nominal_offset: [0.0, y, -params.hand_drop],
    };
    let limbs = vec![
        foot(HUMANOID_LIMBS[0], params.hip_half_width),
        foot(HUMANOID_LIMBS[1], -params.hip_half_width),
        hand(HUMANOID_LIMBS[2], params.shoulder_half_width),
        hand(HUMANOID_LIMBS[3], -params.shoulder_half_width),
    ];
    let mut u_max = Vec::with_capacity(18);
    for _ in 0..2 {
        u_max.extend([params.foot_force_limit; 3]);
        u_max.extend([params.foot_torque_limit; 3]);
    }
    for _ in 0..2 {
        u_max.extend([params.hand_force_limit; 3]);
    }
    let [ix, iy, iz] = params.body_inertia;
    let model = ModelSpec {
        name: "humanoid".into(),
        body_mass: params.body_mass,
        body_inertia: [[ix, 0.0, 0.0], [0.0, iy, 0.0], [0.0, 0.0, iz]],
        limbs,
        n_q: 24,
        n_v: 24,
        n_u: 18,
        u_min: u_max.iter().map(|x| -x).collect(),
        u_max,
        gravity: DEFAULT_GRAVITY,
        friction_coefficient: params.friction_coefficient,
        nominal_height: params.nominal_height,
    };
    model.validate()?;
    Ok(model)
}

fn positive(field: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be > 0, got {x}")))
    }
}
