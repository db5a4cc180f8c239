//! Contact dynamics linearized about one reference step.
//!
//! The smooth velocity update and every gap are made affine in `(x, u)`
//! about the reference point, and the contact frames, Jacobians and masses
//! are frozen there. What remains is a linear complementarity problem per
//! limb, solved on the relaxed central path like the full step.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::limb::{AffineGap, ContactRow, IpOptions, LimbProblem};
use super::step::{limb_forces, step_relaxed};
use super::{contact_frames, ContactForce};
use crate::error::{Error, Result};
use crate::model::{
    integrate_configuration, integrate_configuration_jacobian, smooth_dynamics_unchecked, smooth_jacobian_unchecked,
    ModelSpec, State,
};
use crate::mrp;
use crate::terrain::TerrainModel;
use crate::util::{mat3, seg3, vec3};

/// Frozen data of one contact point.
#[derive(Clone, Debug, PartialEq)]
pub struct LcpContact {
    pub limb: usize,
    pub normal: [f64; 3],
    pub t1: [f64; 3],
    pub t2: [f64; 3],
    pub mu: f64,
    /// Contact-point velocity is `jac * w` for limb velocity `w` (row major, 3 x dofs).
    pub jac: Vec<f64>,
    /// Gap at the reference end state, m.
    pub gap: f64,
    /// Gap gradient w.r.t. the limb configuration at the start of the step.
    pub gap_q: Vec<f64>,
    /// Gap gradient w.r.t. the limb velocity at the end of the step.
    pub gap_w: Vec<f64>,
    /// Rows with a gap beyond the margin are left out of the LCP.
    pub active: bool,
}

/// Coefficients of the time-varying LCP at one reference step.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedStepModel {
    pub h: f64,
    pub state: State,
    pub control: DVector<f64>,
    /// Relaxed step from the reference point at `rho`.
    pub next_state: State,
    pub rho: f64,
    /// `d x+ / d x` and `d x+ / d u` of the relaxed step at the reference point.
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Contact-free velocity `v + h a(x, u)` at the reference point and its Jacobians.
    pub v_free: DVector<f64>,
    pub free_x: DMatrix<f64>,
    pub free_u: DMatrix<f64>,
    pub contacts: Vec<LcpContact>,
}

/// Result of one step of the linearized dynamics.
#[derive(Clone, Debug)]
pub struct LcpStep {
    pub next: DVector<f64>,
    pub forces: Vec<ContactForce>,
    /// Per-limb solver iterates (empty for limbs without active contacts).
    pub solutions: Vec<DVector<f64>>,
    pub dx: DMatrix<f64>,
    pub du: DMatrix<f64>,
    pub iterations: usize,
}

fn limb_mass(model: &ModelSpec, limb: usize) -> DMatrix<f64> {
    let l = &model.limbs[limb];
    let k = l.dofs();
    let mut m = DMatrix::identity(k, k) * l.limb_mass;
    if let Some(j) = &l.inertia {
        m.view_mut((3, 3), (3, 3)).copy_from(&mat3(j));
    }
    m
}

/// Gap of contact offset `r` after a step with end velocity `w`, and its
/// gradients w.r.t. the limb configuration and `w`.
fn gap_linearization(
    terrain: &TerrainModel,
    h: f64,
    q_limb: &DVector<f64>,
    w: &DVector<f64>,
    r: &Vector3<f64>,
) -> (f64, DVector<f64>, DVector<f64>) {
    let k = w.len();
    let p = seg3(q_limb, 0);
    let mut gq = DVector::zeros(k);
    let mut gw = DVector::zeros(k);
    gq[2] = 1.0;
    gw[2] = h;
    if k == 6 {
        let sigma = seg3(q_limb, 3);
        let omega = seg3(w, 3);
        let s_next = mrp::integrate(&sigma, &omega, h);
        let rj = mrp::rotate_jacobian(&s_next, r);
        let ds = Matrix3::identity() + mrp::kinematics_jacobian(&sigma, &omega) * (0.25 * h);
        let d_sigma = rj.row(2) * ds;
        let d_omega = rj.row(2) * mrp::kinematics(&sigma) * (0.25 * h);
        for j in 0..3 {
            gq[3 + j] = d_sigma[j];
            gw[3 + j] = d_omega[j];
        }
        let phi = terrain.signed_distance(&(p + seg3(w, 0) * h + mrp::rotation(&s_next) * r));
        (phi, gq, gw)
    } else {
        (terrain.signed_distance(&(p + seg3(w, 0) * h + r)), gq, gw)
    }
}

/// Linearizes the contact step at `(state, control)`. Contacts whose gap at
/// the reference end state exceeds `margin` are marked inactive.
pub fn linearize_step(
    model: &ModelSpec,
    terrain: &TerrainModel,
    h: f64,
    state: &State,
    control: &DVector<f64>,
    rho: f64,
    margin: f64,
) -> Result<LinearizedStepModel> {
    let relaxed = step_relaxed(model, terrain, h, state, control, rho, None, true)?;
    let n_q = model.n_q;
    let acc = smooth_dynamics_unchecked(model, &state.q, &state.v, control);
    let (ax, au) = smooth_jacobian_unchecked(model, &state.q, &state.v, control);
    let v_free = &state.v + &acc * h;
    let mut free_x = &ax * h;
    for i in 0..model.n_v {
        free_x[(i, n_q + i)] += 1.0;
    }
    let free_u = &au * h;
    let frames = contact_frames(model, terrain, &state.q);
    let mut frame = frames.iter();
    let mut contacts = vec![];
    for (i, (limb, lay)) in model.limbs.iter().zip(model.limb_layouts()).enumerate() {
        let k = lay.dofs;
        let q_limb = state.q.rows(lay.q, k).into_owned();
        let w = relaxed.next_state.v.rows(lay.q, k).into_owned();
        let rot = limb.inertia.map(|_| mrp::rotation(&seg3(&state.q, lay.q + 3)));
        for off in &limb.contact_offsets {
            let fr = frame.next().expect("one frame per contact");
            let r = vec3(off);
            let mut jac = DMatrix::<f64>::zeros(3, k);
            jac.view_mut((0, 0), (3, 3)).copy_from(&Matrix3::identity());
            if let Some(rot) = rot {
                jac.view_mut((0, 3), (3, 3)).copy_from(&(-rot * mrp::skew(&r)));
            }
            let (gap, gap_q, gap_w) = gap_linearization(terrain, h, &q_limb, &w, &r);
            contacts.push(LcpContact {
                limb: i,
                normal: fr.normal.into(),
                t1: fr.t1.into(),
                t2: fr.t2.into(),
                mu: fr.mu,
                jac: jac.transpose().as_slice().to_vec(),
                gap,
                gap_q: gap_q.as_slice().to_vec(),
                gap_w: gap_w.as_slice().to_vec(),
                active: gap <= margin,
            });
        }
    }
    let lin = LinearizedStepModel {
        h,
        state: state.clone(),
        control: control.clone(),
        next_state: relaxed.next_state,
        rho,
        a: relaxed.dx,
        b: relaxed.du,
        v_free,
        free_x,
        free_u,
        contacts,
    };
    let finite = |m: &DMatrix<f64>| m.iter().all(|x| x.is_finite());
    if !(finite(&lin.a) && finite(&lin.b) && finite(&lin.free_x) && finite(&lin.free_u) && lin.next_state.is_finite()) {
        return Err(Error::NonFiniteJacobian { step: 0 });
    }
    Ok(lin)
}

impl LinearizedStepModel {
    fn rows_of(&self, limb: usize, k: usize) -> Vec<(usize, ContactRow)> {
        self.contacts
            .iter()
            .enumerate()
            .filter(|(_, c)| c.limb == limb && c.active)
            .map(|(i, c)| {
                let n = vec3(&c.normal);
                (
                    i,
                    ContactRow {
                        jac: DMatrix::from_row_slice(3, k, &c.jac),
                        normal: n,
                        dirs: ContactRow::pyramid(vec3(&c.t1), vec3(&c.t2)),
                        mu: c.mu,
                    },
                )
            })
            .collect()
    }

    /// Steps the linearized dynamics from state vector `x` under `u` at
    /// relaxation `rho`. `warm` holds per-limb iterates of a nearby solve.
    pub fn step(
        &self,
        model: &ModelSpec,
        x: &DVector<f64>,
        u: &DVector<f64>,
        rho: f64,
        warm: Option<&[DVector<f64>]>,
        jacobians: bool,
    ) -> Result<LcpStep> {
        let (n_q, n_v, n_x, n_u) = (model.n_q, model.n_v, model.n_x(), model.n_u);
        if x.len() != n_x {
            return Err(Error::dim("state vector", n_x, x.len()));
        }
        if u.len() != n_u {
            return Err(Error::dim("control", n_u, u.len()));
        }
        let x_ref = self.state.to_vector();
        let dx = x - &x_ref;
        let du = u - &self.control;
        let v_free = &self.v_free + &self.free_x * &dx + &self.free_u * &du;
        let q = x.rows(0, n_q).into_owned();
        let weight = model.weight();
        let scale = self.h * weight;
        let opts = IpOptions { tol: 1e-9, ..IpOptions::default() };
        let mut v_next = v_free.clone();
        let mut dv = DMatrix::zeros(0, 0);
        if jacobians {
            dv = DMatrix::zeros(n_v, n_x + n_u);
            dv.columns_mut(0, n_x).copy_from(&self.free_x);
            dv.columns_mut(n_x, n_u).copy_from(&self.free_u);
        }
        let mut forces = vec![ContactForce::default(); self.contacts.len()];
        let mut solutions = vec![];
        let mut iterations = 0;
        for (i, lay) in model.limb_layouts().iter().enumerate() {
            let k = lay.dofs;
            let rows = self.rows_of(i, k);
            if rows.is_empty() {
                solutions.push(DVector::zeros(0));
                continue;
            }
            let w_ref = self.next_state.v.rows(lay.q, k);
            let dq_limb = q.rows(lay.q, k) - self.state.q.rows(lay.q, k);
            let mut offset = DVector::zeros(rows.len());
            let mut grad = DMatrix::zeros(rows.len(), k);
            for (c, (ci, _)) in rows.iter().enumerate() {
                let lc = &self.contacts[*ci];
                let gq = DVector::from_column_slice(&lc.gap_q);
                let gw = DVector::from_column_slice(&lc.gap_w);
                offset[c] = lc.gap + gq.dot(&dq_limb) - gw.dot(&w_ref);
                grad.row_mut(c).copy_from(&gw.transpose());
            }
            let gap = AffineGap { offset, grad };
            let problem = LimbProblem {
                mass: limb_mass(model, i),
                w_free: v_free.rows(lay.q, k).into_owned(),
                scale,
                rows: rows.iter().map(|(_, r)| r.clone()).collect(),
                gap: &gap,
            };
            let init = warm.and_then(|w| w.get(i)).filter(|y| y.len() == problem.n());
            let mut out = problem.solve_relaxed(rho, init, &opts);
            iterations += out.iterations;
            if !out.converged {
                // Restart from a looser relaxation and follow it down.
                let mut r = rho.max(1e-1);
                let mut y: Option<DVector<f64>> = None;
                loop {
                    out = problem.solve_relaxed(r, y.as_ref(), &opts);
                    iterations += out.iterations;
                    y = Some(out.y.clone());
                    if r <= rho {
                        break;
                    }
                    r = (r * 0.2).max(rho);
                }
            }
            if !out.converged {
                return Err(Error::SolverFailure { iterations, residual: out.residual, last_state: None });
            }
            v_next.rows_mut(lay.q, k).copy_from(&out.y.rows(0, k));
            for ((ci, _), f) in rows.iter().zip(limb_forces(&problem, &out.y, weight)) {
                forces[*ci] = f;
            }
            if jacobians {
                let n = problem.n();
                let mut g = DMatrix::zeros(n, n_x + n_u);
                let m_scaled = &problem.mass / scale;
                g.rows_mut(0, k).copy_from(&(-&m_scaled * dv.rows(lay.q, k)));
                for ((ci, _), o) in rows.iter().zip(problem.offsets()) {
                    for (j, gq) in self.contacts[*ci].gap_q.iter().enumerate() {
                        g[(o, lay.q + j)] -= gq;
                    }
                }
                let dy = problem
                    .jacobian(&out.y)
                    .lu()
                    .solve(&(-g))
                    .unwrap_or_else(|| DMatrix::from_element(n, n_x + n_u, f64::NAN));
                dv.rows_mut(lay.q, k).copy_from(&dy.rows(0, k));
            }
            solutions.push(out.y);
        }
        let q_next = integrate_configuration(model, &q, &v_next, self.h);
        let mut next = DVector::zeros(n_x);
        next.rows_mut(0, n_q).copy_from(&q_next);
        next.rows_mut(n_q, n_v).copy_from(&v_next);
        let (jdx, jdu) = if jacobians {
            let (iq, iv, _) = integrate_configuration_jacobian(model, &q, &v_next, self.h);
            let mut full = DMatrix::zeros(n_x, n_x + n_u);
            let mut dq = &iv * &dv;
            for i in 0..n_q {
                for j in 0..n_q {
                    dq[(i, j)] += iq[(i, j)];
                }
            }
            full.rows_mut(0, n_q).copy_from(&dq);
            full.rows_mut(n_q, n_v).copy_from(&dv);
            (full.columns(0, n_x).into_owned(), full.columns(n_x, n_u).into_owned())
        } else {
            (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
        };
        Ok(LcpStep { next, forces, solutions, dx: jdx, du: jdu, iterations })
    }
}
