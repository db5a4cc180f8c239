use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::limb::{ContactRow, GapModel, IpOptions, IpOutcome, LimbProblem};
use super::{check_step_inputs, complementarity_residual, contact_frames, ContactForce, RelaxationSchedule, StepResult};
use crate::error::{Error, Result};
use crate::model::{
    integrate_configuration, integrate_configuration_jacobian, orientation_offsets, smooth_dynamics_unchecked,
    smooth_jacobian_unchecked, LimbLayout, ModelSpec, State,
};
use crate::mrp;
use crate::terrain::TerrainModel;
use crate::util::{mat3, seg3, vec3};

/// Gap of every contact of one limb at the end of the step, as a function
/// of the limb's end-of-step velocity.
struct LimbGap<'a> {
    terrain: &'a TerrainModel,
    h: f64,
    p: Vector3<f64>,
    sigma: Option<Vector3<f64>>,
    offsets: Vec<Vector3<f64>>,
}

impl GapModel for LimbGap<'_> {
    fn eval(&self, w: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.offsets.len();
        let p_next = self.p + seg3(w, 0) * self.h;
        let mut phi = DVector::zeros(n);
        let mut grad = DMatrix::zeros(n, w.len());
        match self.sigma {
            None => {
                for (c, r) in self.offsets.iter().enumerate() {
                    phi[c] = self.terrain.signed_distance(&(p_next + r));
                    grad[(c, 2)] = self.h;
                }
            }
            Some(s) => {
                let b = mrp::kinematics(&s);
                let s_next = mrp::integrate(&s, &seg3(w, 3), self.h);
                let rot = mrp::rotation(&s_next);
                for (c, r) in self.offsets.iter().enumerate() {
                    phi[c] = self.terrain.signed_distance(&(p_next + rot * r));
                    grad[(c, 2)] = self.h;
                    let dz = mrp::rotate_jacobian(&s_next, r).row(2) * b * (0.25 * self.h);
                    for j in 0..3 {
                        grad[(c, 3 + j)] = dz[j];
                    }
                }
            }
        }
        (phi, grad)
    }
}

struct LimbSetup<'a> {
    lay: LimbLayout,
    mass: DMatrix<f64>,
    w_free: DVector<f64>,
    rows: Vec<ContactRow>,
    gap: LimbGap<'a>,
}

impl LimbSetup<'_> {
    fn problem(&self, scale: f64) -> LimbProblem<'_> {
        LimbProblem {
            mass: self.mass.clone(),
            w_free: self.w_free.clone(),
            scale,
            rows: self.rows.clone(),
            gap: &self.gap,
        }
    }
}

fn limb_setups<'a>(
    model: &ModelSpec,
    terrain: &'a TerrainModel,
    h: f64,
    q: &DVector<f64>,
    v: &DVector<f64>,
    a: &DVector<f64>,
) -> Vec<LimbSetup<'a>> {
    let frames = contact_frames(model, terrain, q);
    let mut next_frame = frames.iter();
    model
        .limbs
        .iter()
        .zip(model.limb_layouts())
        .map(|(limb, lay)| {
            let k = lay.dofs;
            let mut mass = DMatrix::identity(k, k) * limb.limb_mass;
            let sigma = limb.inertia.as_ref().map(|j| {
                mass.view_mut((3, 3), (3, 3)).copy_from(&mat3(j));
                seg3(q, lay.q + 3)
            });
            let w_free = v.rows(lay.q, k) + a.rows(lay.q, k) * h;
            let offsets: Vec<Vector3<f64>> = limb.contact_offsets.iter().map(vec3).collect();
            let rows = offsets
                .iter()
                .map(|r| {
                    let fr = next_frame.next().expect("one frame per contact");
                    let mut jac = DMatrix::zeros(3, k);
                    jac.view_mut((0, 0), (3, 3)).copy_from(&Matrix3::identity());
                    if let Some(s) = sigma {
                        jac.view_mut((0, 3), (3, 3)).copy_from(&(-mrp::rotation(&s) * mrp::skew(r)));
                    }
                    ContactRow {
                        jac,
                        normal: fr.normal,
                        dirs: ContactRow::pyramid(fr.t1, fr.t2),
                        mu: fr.mu,
                    }
                })
                .collect();
            LimbSetup {
                lay,
                mass,
                w_free,
                rows,
                gap: LimbGap {
                    terrain,
                    h,
                    p: seg3(q, lay.q),
                    sigma,
                    offsets,
                },
            }
        })
        .collect()
}

pub(super) fn limb_forces(p: &LimbProblem, y: &DVector<f64>, weight: f64) -> Vec<ContactForce> {
    p.rows
        .iter()
        .zip(p.offsets())
        .map(|(r, o)| {
            if r.frictional() {
                ContactForce {
                    normal: weight * y[o],
                    tangential: [1, 2, 3, 4].map(|j| weight * y[o + j]),
                    gamma: y[o + 5],
                }
            } else {
                ContactForce {
                    normal: weight * y[o],
                    ..Default::default()
                }
            }
        })
        .collect()
}

fn max_product(p: &LimbProblem, y: &DVector<f64>) -> f64 {
    p.pairs().iter().fold(0.0_f64, |m, &(s, l)| m.max((y[s] * y[l]).abs()))
}

fn assemble(model: &ModelSpec, h: f64, state: &State, a: &DVector<f64>, ws: &[DVector<f64>]) -> State {
    let mut v = &state.v + a * h;
    for (lay, w) in model.limb_layouts().iter().zip(ws) {
        v.rows_mut(lay.q, lay.dofs).copy_from(w);
    }
    let mut q = integrate_configuration(model, &state.q, &v, h);
    crate::model::rechart_configuration(model, &mut q);
    State { q, v }
}

/// Advances `state` by one semi-implicit step with rigid, perfectly
/// inelastic contact. The relaxed problem is followed down the schedule and
/// then snapped onto the exact contact mode it identifies.
pub fn step_ncp(
    model: &ModelSpec,
    terrain: &TerrainModel,
    h: f64,
    state: &State,
    control: &DVector<f64>,
    schedule: &RelaxationSchedule,
) -> Result<StepResult> {
    check_step_inputs(model, h, state, control)?;
    schedule.validate()?;
    let a = smooth_dynamics_unchecked(model, &state.q, &state.v, control);
    let setups = limb_setups(model, terrain, h, &state.q, &state.v, &a);
    let weight = model.weight();
    let opts = IpOptions {
        tol: schedule.tolerance,
        max_iter: schedule.max_iterations,
        ..IpOptions::default()
    };
    let stages = schedule.stages();
    let mut stage_residuals = vec![0.0_f64; stages.len()];
    let mut iterations = 0;
    let mut ws = Vec::with_capacity(setups.len());
    let mut forces = Vec::with_capacity(model.n_contacts());
    for s in &setups {
        let p = s.problem(h * weight);
        let mut last: Option<IpOutcome> = None;
        for (i, rho) in stages.iter().enumerate() {
            let out = p.solve_relaxed(*rho, last.as_ref().map(|o| &o.y), &opts);
            iterations += out.iterations;
            stage_residuals[i] = stage_residuals[i].max(max_product(&p, &out.y));
            last = Some(out);
        }
        let mut out = last.expect("at least one stage");
        let mut y = out.y.clone();
        let polished = if schedule.polish { p.polish(&y) } else { None };
        match polished {
            Some((yp, _)) => y = yp,
            None => {
                // Push the relaxation further until the products meet the
                // acceptance tolerance.
                let mut rho = schedule.rho_end;
                for _ in 0..4 {
                    if out.converged && max_product(&p, &out.y) <= 0.5 * schedule.accept_tolerance {
                        break;
                    }
                    rho *= schedule.decay;
                    out = p.solve_relaxed(rho, Some(&out.y), &opts);
                    iterations += out.iterations;
                }
                y = out.y.clone();
            }
        }
        ws.push(y.rows(0, s.lay.dofs).into_owned());
        forces.extend(limb_forces(&p, &y, weight));
    }
    let next_state = assemble(model, h, state, &a, &ws);
    let residual = complementarity_residual(model, terrain, (state, &next_state), &forces)?;
    if !next_state.is_finite() || !(residual <= schedule.accept_tolerance) {
        return Err(Error::SolverFailure {
            iterations,
            residual,
            last_state: Some(next_state.to_vector().as_slice().to_vec()),
        });
    }
    Ok(StepResult {
        next_state,
        forces,
        residual,
        iterations,
        stage_residuals,
    })
}

/// One step of the relaxed (smoothed) contact dynamics at a fixed `rho`,
/// with its sensitivities obtained by implicit differentiation.
#[derive(Clone, Debug)]
pub struct RelaxedStep {
    pub next_state: State,
    pub forces: Vec<ContactForce>,
    /// Per-limb solver iterates, usable as warm starts.
    pub solutions: Vec<DVector<f64>>,
    /// `d x+ / d x`, `d x+ / d u`, `d x+ / d h`. Empty when not requested.
    pub dx: DMatrix<f64>,
    pub du: DMatrix<f64>,
    pub dh: DVector<f64>,
    pub iterations: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn step_relaxed(
    model: &ModelSpec,
    terrain: &TerrainModel,
    h: f64,
    state: &State,
    control: &DVector<f64>,
    rho: f64,
    warm: Option<&[DVector<f64>]>,
    jacobians: bool,
) -> Result<RelaxedStep> {
    check_step_inputs(model, h, state, control)?;
    if !(rho > 0.0) {
        return Err(Error::invalid("rho", "must be > 0"));
    }
    let a = smooth_dynamics_unchecked(model, &state.q, &state.v, control);
    let setups = limb_setups(model, terrain, h, &state.q, &state.v, &a);
    let weight = model.weight();
    let scale = h * weight;
    let opts = IpOptions::default();
    let mut iterations = 0;
    let mut solutions = Vec::with_capacity(setups.len());
    let mut ws = Vec::with_capacity(setups.len());
    let mut forces = Vec::with_capacity(model.n_contacts());
    for (i, s) in setups.iter().enumerate() {
        let p = s.problem(scale);
        let mut out = p.solve_relaxed(rho, warm.and_then(|w| w.get(i)), &opts);
        iterations += out.iterations;
        if !out.converged {
            let mut r = rho.max(1e-1);
            let mut y: Option<DVector<f64>> = None;
            loop {
                out = p.solve_relaxed(r, y.as_ref(), &opts);
                iterations += out.iterations;
                y = Some(out.y.clone());
                if r <= rho {
                    break;
                }
                r = (r * 0.2).max(rho);
            }
        }
        if !out.converged {
            return Err(Error::SolverFailure {
                iterations,
                residual: out.residual,
                last_state: None,
            });
        }
        ws.push(out.y.rows(0, s.lay.dofs).into_owned());
        forces.extend(limb_forces(&p, &out.y, weight));
        solutions.push(out.y);
    }
    let next_state = assemble(model, h, state, &a, &ws);
    let (dx, du, dh) = if jacobians {
        relaxed_jacobians(model, h, state, control, &a, &setups, &solutions, &next_state)
    } else {
        (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0), DVector::zeros(0))
    };
    Ok(RelaxedStep {
        next_state,
        forces,
        solutions,
        dx,
        du,
        dh,
        iterations,
    })
}

#[allow(clippy::too_many_arguments)]
fn relaxed_jacobians(
    model: &ModelSpec,
    h: f64,
    state: &State,
    control: &DVector<f64>,
    a: &DVector<f64>,
    setups: &[LimbSetup],
    solutions: &[DVector<f64>],
    next: &State,
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let (n_q, n_v, n_u, n_x) = (model.n_q, model.n_v, model.n_u, model.n_x());
    let n_p = n_x + n_u + 1;
    let hc = n_p - 1;
    let (ax, au) = smooth_jacobian_unchecked(model, &state.q, &state.v, control);
    let scale = h * model.weight();

    // Explicit velocity update v + h a, for every coordinate.
    let mut dv_explicit = DMatrix::zeros(n_v, n_p);
    for i in 0..n_v {
        dv_explicit[(i, n_q + i)] += 1.0;
        for j in 0..n_x {
            dv_explicit[(i, j)] += h * ax[(i, j)];
        }
        for j in 0..n_u {
            dv_explicit[(i, n_x + j)] = h * au[(i, j)];
        }
        dv_explicit[(i, hc)] = a[i];
    }
    let mut dv = dv_explicit.clone();

    for (s, y) in setups.iter().zip(solutions) {
        let p = s.problem(scale);
        let k = s.lay.dofs;
        let w = y.rows(0, k).into_owned();
        let dwf = dv_explicit.rows(s.lay.q, k).into_owned();
        let mut g = DMatrix::zeros(p.n(), n_p);
        let m_scaled = &s.mass / scale;
        g.rows_mut(0, k).copy_from(&(-&m_scaled * &dwf));
        let hcol = -(&s.mass * (&w - &s.w_free)) / (h * scale);
        for i in 0..k {
            g[(i, hc)] += hcol[i];
        }
        let sig_col = s.lay.q + 3;
        for (c, (row, o)) in p.rows.iter().zip(p.offsets()).enumerate() {
            let r = s.gap.offsets[c];
            g[(o, s.lay.q + 2)] -= 1.0;
            let mut dphi_dh = w[2];
            if let Some(sigma) = s.gap.sigma {
                let omega = seg3(&w, 3);
                let f = p.force_of(c, y);
                let dtorque = mrp::skew(&r) * mrp::rotate_transpose_jacobian(&sigma, &f);
                let s_next = mrp::integrate(&sigma, &omega, h);
                let rj = mrp::rotate_jacobian(&s_next, &r);
                let ds = Matrix3::identity() + mrp::kinematics_jacobian(&sigma, &omega) * (0.25 * h);
                let dphi_ds = rj.row(2) * ds;
                dphi_dh += (rj.row(2) * mrp::kinematics(&sigma) * omega * 0.25)[0];
                let dvel = mrp::rotate_jacobian(&sigma, &omega.cross(&r));
                for j in 0..3 {
                    for i in 0..3 {
                        g[(3 + i, sig_col + j)] -= dtorque[(i, j)];
                    }
                    g[(o, sig_col + j)] -= dphi_ds[j];
                    if row.frictional() {
                        for (d_idx, d) in row.dirs.iter().enumerate() {
                            g[(o + 1 + d_idx, sig_col + j)] -= (d.transpose() * dvel.column(j))[0];
                        }
                    }
                }
            }
            g[(o, hc)] -= dphi_dh;
        }
        let lu = p.jacobian(y).lu();
        let dy = lu.solve(&(-g)).unwrap_or_else(|| DMatrix::from_element(p.n(), n_p, f64::NAN));
        dv.rows_mut(s.lay.q, k).copy_from(&dy.rows(0, k));
    }

    let (iq, iv, ih) = integrate_configuration_jacobian(model, &state.q, &next.v, h);
    let mut dq = &iv * &dv;
    for i in 0..n_q {
        for j in 0..n_q {
            dq[(i, j)] += iq[(i, j)];
        }
        dq[(i, hc)] += ih[i];
    }
    // Shadow-set switch applied after integration.
    let raw = integrate_configuration(model, &state.q, &next.v, h);
    for at in orientation_offsets(model) {
        let sg = seg3(&raw, at);
        let s2 = sg.norm_squared();
        if s2 > mrp::RECHART_NORM * mrp::RECHART_NORM {
            let jr = -(Matrix3::identity() / s2 - sg * sg.transpose() * (2.0 / (s2 * s2)));
            let block = dq.rows(at, 3).into_owned();
            dq.rows_mut(at, 3).copy_from(&(jr * block));
        }
    }
    let mut dfull = DMatrix::zeros(n_x, n_p);
    dfull.rows_mut(0, n_q).copy_from(&dq);
    dfull.rows_mut(n_q, n_v).copy_from(&dv);
    let dx = dfull.columns(0, n_x).into_owned();
    let du = dfull.columns(n_x, n_u).into_owned();
    let dh = dfull.column(hc).into_owned();
    (dx, du, dh)
}

/// Semi-implicit step with prescribed contact forces instead of solved ones.
pub fn step_with_forces(
    model: &ModelSpec,
    terrain: &TerrainModel,
    h: f64,
    state: &State,
    control: &DVector<f64>,
    forces: &[ContactForce],
) -> Result<State> {
    check_step_inputs(model, h, state, control)?;
    if forces.len() != model.n_contacts() {
        return Err(Error::dim("forces", model.n_contacts(), forces.len()));
    }
    let a = smooth_dynamics_unchecked(model, &state.q, &state.v, control);
    let setups = limb_setups(model, terrain, h, &state.q, &state.v, &a);
    let mut next_force = forces.iter();
    let ws: Vec<DVector<f64>> = setups
        .iter()
        .map(|s| {
            let mut gen = DVector::zeros(s.lay.dofs);
            for row in &s.rows {
                let f = next_force.next().expect("one force per contact");
                let mut world = row.normal * f.normal;
                if row.frictional() {
                    for (d, t) in row.dirs.iter().zip(f.tangential) {
                        world += d * t;
                    }
                }
                gen += row.jac.transpose() * world;
            }
            let dw = s.mass.clone().lu().solve(&(gen * h)).unwrap_or_else(|| DVector::from_element(s.lay.dofs, f64::NAN));
            &s.w_free + dw
        })
        .collect();
    Ok(assemble(model, h, state, &a, &ws))
}
