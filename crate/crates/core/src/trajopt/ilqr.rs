use nalgebra::{DMatrix, DVector};

use super::{box_qp, check_dynamics_feasibility, extract_contact_schedule, ReferenceTrajectory, SolveStatus, TrajOptProblem};
use crate::contact::{step_ncp, step_relaxed, RelaxationSchedule, RelaxedStep};
use crate::error::{Error, Result};
use crate::model::State;
use crate::sim::{Policy, WrenchTrackingPolicy};

/// A problem together with its per-step control baseline.
pub(crate) struct Ctx<'a> {
    p: &'a TrajOptProblem,
    base: Vec<DVector<f64>>,
}

impl<'a> Ctx<'a> {
    pub(crate) fn new(p: &'a TrajOptProblem) -> Self {
        Ctx {
            p,
            base: p.control_baseline(),
        }
    }
}

impl std::ops::Deref for Ctx<'_> {
    type Target = TrajOptProblem;
    fn deref(&self) -> &TrajOptProblem {
        self.p
    }
}

struct Rollout {
    x: Vec<DVector<f64>>,
    u: Vec<DVector<f64>>,
    h: Vec<f64>,
    steps: Vec<RelaxedStep>,
    cost: f64,
}

struct Gains {
    k: DVector<f64>,
    gain: DMatrix<f64>,
}

fn err(p: &Ctx, t: usize, x: &DVector<f64>) -> DVector<f64> {
    x - p.reference[t].to_vector()
}

fn weighted(w: &[f64], e: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(e.len(), w.iter().zip(e.iter()).map(|(a, b)| a * b))
}

fn stage_cost(p: &Ctx, t: usize, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> f64 {
    let e = err(p, t, x);
    let du = u - &p.base[t];
    let track = e.dot(&weighted(&p.weights.q, &e)) + du.dot(&weighted(&p.weights.r, &du));
    0.5 * h * track + p.h_weight() * (h - p.h_nom).powi(2)
}

fn terminal_cost(p: &Ctx, x: &DVector<f64>) -> f64 {
    let e = err(p, p.horizon() - 1, x);
    e.dot(&weighted(&p.weights.q_n, &e))
}

pub(crate) fn total_cost(p: &Ctx, x: &[DVector<f64>], u: &[DVector<f64>], h: &[f64]) -> f64 {
    let stages: f64 = (0..u.len()).map(|t| stage_cost(p, t, &x[t], &u[t], h[t])).sum();
    stages + terminal_cost(p, &x[x.len() - 1])
}

fn n_z(p: &Ctx) -> usize {
    p.model.n_u + usize::from(p.config.optimize_h)
}

/// Rolls the relaxed dynamics forward. `policy(t, x)` returns the control
/// and step length to apply at step `t`.
fn simulate(
    p: &Ctx,
    rho: f64,
    warm: Option<&Rollout>,
    mut policy: impl FnMut(usize, &DVector<f64>) -> (DVector<f64>, f64),
) -> Result<Rollout> {
    let n = p.horizon() - 1;
    let mut state = p.first_state().clone();
    let mut out = Rollout {
        x: vec![state.to_vector()],
        u: Vec::with_capacity(n),
        h: Vec::with_capacity(n),
        steps: Vec::with_capacity(n),
        cost: 0.0,
    };
    for t in 0..n {
        let (u, h) = policy(t, &out.x[t]);
        let w = warm.map(|r| r.steps[t].solutions.as_slice());
        let step = step_relaxed(&p.model, &p.terrain, h, &state, &u, rho, w, true)?;
        if !step.next_state.is_finite() || step.dx.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteJacobian { step: t });
        }
        out.cost += stage_cost(p, t, &out.x[t], &u, h);
        state = step.next_state.clone();
        out.x.push(state.to_vector());
        out.u.push(u);
        out.h.push(h);
        out.steps.push(step);
    }
    out.cost += terminal_cost(p, &out.x[n]);
    Ok(out)
}

fn open_loop(p: &Ctx, rho: f64, u: &[DVector<f64>], h: &[f64], warm: Option<&Rollout>) -> Result<Rollout> {
    simulate(p, rho, warm, |t, _| (u[t].clone(), h[t]))
}

/// Input Jacobian `[d x+/d u | d x+/d h]` of step `t`.
fn input_jacobian(p: &Ctx, step: &RelaxedStep) -> DMatrix<f64> {
    let n_u = p.model.n_u;
    let mut b = DMatrix::zeros(p.model.n_x(), n_z(p));
    b.columns_mut(0, n_u).copy_from(&step.du);
    if p.config.optimize_h {
        b.set_column(n_u, &step.dh);
    }
    b
}

/// First and second derivatives of stage `t` in `(x, z)`.
#[allow(clippy::type_complexity)]
fn stage_derivatives(
    p: &Ctx,
    t: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> (DVector<f64>, DVector<f64>, DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (n_x, n_u, m) = (p.model.n_x(), p.model.n_u, n_z(p));
    let e = err(p, t, x);
    let qe = weighted(&p.weights.q, &e);
    let du = u - &p.base[t];
    let ru = weighted(&p.weights.r, &du);
    let lx = &qe * h;
    let lxx = DVector::from_iterator(n_x, p.weights.q.iter().map(|w| w * h));
    let mut lz = DVector::zeros(m);
    let mut lzz = DMatrix::zeros(m, m);
    let mut lzx = DMatrix::zeros(m, n_x);
    for i in 0..n_u {
        lz[i] = h * ru[i];
        lzz[(i, i)] = h * p.weights.r[i];
    }
    if p.config.optimize_h {
        let wh = p.h_weight();
        lz[n_u] = 0.5 * (e.dot(&qe) + du.dot(&ru)) + 2.0 * wh * (h - p.h_nom);
        lzz[(n_u, n_u)] = 2.0 * wh;
        for i in 0..n_u {
            lzz[(n_u, i)] = ru[i];
            lzz[(i, n_u)] = ru[i];
        }
        lzx.set_row(n_u, &qe.transpose());
    }
    (lx, lxx, lz, lzz, lzx)
}

fn z_bounds(p: &Ctx, u: &DVector<f64>, h: f64) -> (DVector<f64>, DVector<f64>) {
    let (n_u, m) = (p.model.n_u, n_z(p));
    let mut lo = DVector::zeros(m);
    let mut hi = DVector::zeros(m);
    for i in 0..n_u {
        lo[i] = p.model.u_min[i] - u[i];
        hi[i] = p.model.u_max[i] - u[i];
    }
    if p.config.optimize_h {
        lo[n_u] = p.h_min() - h;
        hi[n_u] = p.h_max() - h;
    }
    (lo, hi)
}

/// Returns the gains and the two coefficients of the predicted decrease
/// `-(alpha d1 + alpha^2 d2)`.
fn backward(p: &Ctx, r: &Rollout, mu: f64, prev: Option<&[Gains]>) -> Option<(Vec<Gains>, f64, f64)> {
    let n = p.horizon() - 1;
    let (n_x, n_u, m) = (p.model.n_x(), p.model.n_u, n_z(p));
    let e_n = err(p, n, &r.x[n]);
    let mut vx = weighted(&p.weights.q_n, &e_n) * 2.0;
    let mut vxx = DMatrix::from_diagonal(&DVector::from_iterator(n_x, p.weights.q_n.iter().map(|w| 2.0 * w)));
    let reg_scale = p.weights.max_entry();
    let mut gains: Vec<Gains> = Vec::with_capacity(n);
    let (mut d1, mut d2) = (0.0, 0.0);
    for t in (0..n).rev() {
        let a = &r.steps[t].dx;
        let b = input_jacobian(p, &r.steps[t]);
        let (lx, lxx, lz, lzz, lzx) = stage_derivatives(p, t, &r.x[t], &r.u[t], r.h[t]);
        let at = a.transpose();
        let bt = b.transpose();
        let vxx_a = &vxx * a;
        let vxx_b = &vxx * &b;
        let qx = lx + &at * &vx;
        let qz = lz + &bt * &vx;
        let mut qxx = &at * &vxx_a;
        for i in 0..n_x {
            qxx[(i, i)] += lxx[i];
        }
        let qzz = lzz + &bt * &vxx_b;
        let qzx = lzx + &bt * &vxx_a;
        let mut qzz_reg = qzz.clone();
        for i in 0..m {
            let s = if i < n_u { 1.0 } else { 1.0 / (p.h_nom * p.h_nom) };
            qzz_reg[(i, i)] += mu * reg_scale * s;
        }
        let (lo, hi) = z_bounds(p, &r.u[t], r.h[t]);
        let x0 = prev.map_or_else(|| DVector::zeros(m), |g| g[t].k.clone());
        let sol = box_qp(&qzz_reg, &qz, &lo, &hi, &x0)?;
        let mut gain = DMatrix::zeros(m, n_x);
        if let Some(c) = &sol.chol_free {
            let idx: Vec<usize> = (0..m).filter(|&i| sol.free[i]).collect();
            let rhs = DMatrix::from_fn(idx.len(), n_x, |i, j| qzx[(idx[i], j)]);
            let kf = c.solve(&rhs);
            for (row, &i) in idx.iter().enumerate() {
                gain.set_row(i, &(-kf.row(row)));
            }
        }
        let k = sol.x;
        d1 += k.dot(&qz);
        d2 += 0.5 * k.dot(&(&qzz * &k));
        let gt = gain.transpose();
        vx = qx + &gt * (&qzz * &k) + &gt * &qz + qzx.transpose() * &k;
        let cross = &gt * &qzx;
        vxx = qxx + &gt * &qzz * &gain + &cross + cross.transpose();
        vxx = (&vxx + vxx.transpose()) * 0.5;
        gains.push(Gains { k, gain });
    }
    gains.reverse();
    Some((gains, d1, d2))
}

fn clamp_z(p: &Ctx, u: DVector<f64>, h: f64) -> (DVector<f64>, f64) {
    (p.model.clamp_control(&u), h.clamp(p.h_min(), p.h_max()))
}

fn forward(p: &Ctx, nominal: &Rollout, gains: &[Gains], alpha: f64, rho: f64) -> Result<Rollout> {
    let n_u = p.model.n_u;
    simulate(p, rho, Some(nominal), |t, x| {
        let g = &gains[t];
        let dz = &g.k * alpha + &g.gain * (x - &nominal.x[t]);
        let u = &nominal.u[t] + dz.rows(0, n_u);
        let h = if p.config.optimize_h { nominal.h[t] + dz[n_u] } else { nominal.h[t] };
        clamp_z(p, u, h)
    })
}

/// Gradient of the relaxed objective with respect to every step's
/// `(u_t, h_t)` (`u_t` only when step lengths are frozen), by the adjoint
/// method. The dynamics are those of the relaxed step at `rho`.
pub fn reduced_gradient(problem: &TrajOptProblem, controls: &[DVector<f64>], h: &[f64], rho: f64) -> Result<DVector<f64>> {
    problem.validate()?;
    let n = problem.horizon() - 1;
    if controls.len() != n || h.len() != n {
        return Err(Error::dim("controls", n, controls.len()));
    }
    let ctx = Ctx::new(problem);
    let r = open_loop(&ctx, rho, controls, h, None)?;
    Ok(gradient_of(&ctx, &r))
}

fn gradient_of(p: &Ctx, r: &Rollout) -> DVector<f64> {
    let n = p.horizon() - 1;
    let m = n_z(p);
    let mut grad = DVector::zeros(n * m);
    let mut lam = weighted(&p.weights.q_n, &err(p, n, &r.x[n])) * 2.0;
    for t in (0..n).rev() {
        let (lx, _, lz, _, _) = stage_derivatives(p, t, &r.x[t], &r.u[t], r.h[t]);
        let b = input_jacobian(p, &r.steps[t]);
        grad.rows_mut(t * m, m).copy_from(&(lz + b.transpose() * &lam));
        lam = lx + r.steps[t].dx.transpose() * &lam;
    }
    grad
}

/// Infinity norm of the gradient with components pushing into active
/// bounds removed.
fn projected_norm(p: &Ctx, r: &Rollout, grad: &DVector<f64>) -> f64 {
    let (n_u, m) = (p.model.n_u, n_z(p));
    let mut worst: f64 = 0.0;
    for t in 0..r.u.len() {
        for i in 0..m {
            let g = grad[t * m + i];
            let (val, lo, hi) = if i < n_u {
                (r.u[t][i], p.model.u_min[i], p.model.u_max[i])
            } else {
                (r.h[t], p.h_min(), p.h_max())
            };
            let blocked = (val <= lo && g > 0.0) || (val >= hi && g < 0.0);
            if !blocked {
                worst = worst.max(g.abs());
            }
        }
    }
    worst
}

/// Minimizes the tracking cost at one relaxation level. Returns whether the
/// level converged and the iterations used.
fn solve_level(p: &Ctx, rho: f64, cur: &mut Rollout) -> (bool, usize) {
    let tol = p.config.cost_tolerance;
    let mut mu: f64 = 1e-6;
    let mut prev: Option<Vec<Gains>> = None;
    for it in 0..p.config.max_iterations {
        let Some((gains, d1, d2)) = backward(p, cur, mu, prev.as_deref()) else {
            mu = (mu * 10.0).max(1e-6);
            if mu > 1e10 {
                return (false, it + 1);
            }
            continue;
        };
        let expected = -(d1 + d2);
        if expected <= tol * cur.cost.abs().max(f64::MIN_POSITIVE) {
            return (true, it + 1);
        }
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..12 {
            if let Ok(trial) = forward(p, cur, &gains, alpha, rho) {
                let predicted = -(alpha * d1 + alpha * alpha * d2);
                let actual = cur.cost - trial.cost;
                if actual > 0.0 && actual >= 1e-4 * predicted {
                    accepted = Some(trial);
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some(trial) => {
                let decrease = cur.cost - trial.cost;
                *cur = trial;
                prev = Some(gains);
                mu = if mu <= 1e-9 { 0.0 } else { mu / 10.0 };
                if decrease <= tol * cur.cost.abs().max(f64::MIN_POSITIVE) {
                    return (true, it + 1);
                }
            }
            None => {
                mu = (mu * 10.0).max(1e-6);
                if mu > 1e10 {
                    return (expected <= 1e-6 * cur.cost.abs(), it + 1);
                }
            }
        }
    }
    (false, p.config.max_iterations)
}

/// Closed-loop roll-out of the wrench-tracking policy toward the reference.
fn policy_rollout(p: &Ctx, rho: f64) -> Result<Rollout> {
    let mut policy = WrenchTrackingPolicy::new(&p.model, &p.terrain, p.reference.clone(), p.h_nom)?;
    simulate(p, rho, None, |t, x| {
        let s = State::from_vector(&p.model, x).expect("state dimension");
        (policy.control(t as f64 * p.h_nom, &s), p.h_nom)
    })
}

/// Starting iterate at a tighter relaxation: the current iterate
/// re-simulated under the LQR feedback of the old level (open loop if that
/// fails), or a fresh policy roll-out when that is cheaper. Contact
/// gradients vanish as the relaxation tightens, so an iterate that kept a
/// foot down rarely learns to lift it.
fn transition(p: &Ctx, cur: &Rollout, rho: f64) -> Option<Rollout> {
    let carried = backward(p, cur, 1e-3, None)
        .and_then(|(g, _, _)| forward(p, cur, &g, 0.0, rho).ok())
        .or_else(|| open_loop(p, rho, &cur.u, &cur.h, Some(cur)).ok());
    let fresh = policy_rollout(p, rho).ok();
    match (carried, fresh) {
        (Some(a), Some(b)) => Some(if b.cost < a.cost { b } else { a }),
        (a, b) => a.or(b),
    }
}

pub(super) fn solve(problem: &TrajOptProblem) -> Result<ReferenceTrajectory> {
    let ctx = Ctx::new(problem);
    let p = &ctx;
    let n = p.horizon() - 1;
    let rhos = &p.config.rho_schedule;
    // Initial iterate: a feedback-stabilized roll-out toward the reference.
    let mut cur = policy_rollout(p, rhos[0])?;
    let mut iterations = 0;
    let mut converged = false;
    let mut final_rho = rhos[0];
    for (i, &rho) in rhos.iter().enumerate() {
        if i > 0 {
            match transition(p, &cur, rho) {
                Some(next) => cur = next,
                None => {
                    log::warn!("could not move to rho {rho:e}; keeping rho {:e}", rhos[i - 1]);
                    break;
                }
            }
        }
        final_rho = rho;
        let (ok, its) = solve_level(p, rho, &mut cur);
        iterations += its;
        converged = ok;
        log::debug!("rho {rho:e}: cost {:.6e}, {its} iterations, converged {ok}", cur.cost);
    }
    let rho = final_rho;
    let kkt_residual = projected_norm(p, &cur, &gradient_of(p, &cur));

    // Replay through the exact contact step, under the LQR feedback of the
    // last level so the small relaxed-vs-exact mismatch does not grow.
    let schedule = RelaxationSchedule::default();
    let feedback = backward(p, &cur, 1e-3, None).map(|(g, _, _)| g);
    let mut state: State = p.first_state().clone();
    let mut states = vec![state.clone()];
    let mut forces = Vec::with_capacity(n);
    for t in 0..n {
        if let Some(g) = &feedback {
            let du = (&g[t].gain * (state.to_vector() - &cur.x[t])).rows(0, p.model.n_u).into_owned();
            cur.u[t] = p.model.clamp_control(&(&cur.u[t] + du));
        }
        let r = step_ncp(&p.model, &p.terrain, cur.h[t], &state, &cur.u[t], &schedule)?;
        state = r.next_state;
        states.push(state.clone());
        forces.push(r.forces);
    }
    let xs: Vec<DVector<f64>> = states.iter().map(State::to_vector).collect();
    let cost = total_cost(p, &xs, &cur.u, &cur.h);
    let min_gap = states
        .iter()
        .flat_map(|s| p.model.contact_points(&s.q))
        .map(|c| p.terrain.signed_distance(&c.position))
        .fold(f64::INFINITY, f64::min);
    let mut out = ReferenceTrajectory {
        h: cur.h,
        states,
        controls: cur.u,
        forces,
        cost,
        kkt_residual,
        max_dynamics_defect: 0.0,
        max_complementarity: 0.0,
        min_gap,
        contact_names: p.model.contact_names(),
        contact_schedule: vec![],
        status: if converged { SolveStatus::Converged } else { SolveStatus::MaxIterations },
        iterations,
        rho,
    };
    let report = check_dynamics_feasibility(&out, &p.model, &p.terrain, p.config.dynamics_tolerance)?;
    out.max_dynamics_defect = report.max_defect;
    out.max_complementarity = report.max_complementarity;
    if !report.passed {
        out.status = SolveStatus::MaxIterations;
    }
    out.contact_schedule = extract_contact_schedule(&out, p.config.contact_force_fraction * p.model.weight());
    Ok(out)
}
