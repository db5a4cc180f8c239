//! Contact subproblem for a single limb.
//!
//! Contacts only act on limbs, and limbs only couple to the body through the
//! (explicit) internal forces, so each limb's contact step is an independent
//! small complementarity problem in
//!
//! ```text
//! y = [ w+ | per contact: lambda_n, lambda_t[4], gamma, s_n, s_t[4], s_f ]
//! ```
//!
//! with forces normalized by the robot weight. Residual rows:
//!
//! ```text
//! M (w+ - w_free) / scale - sum_c J_c^T (n lambda_n + sum_k d_k lambda_t,k) = 0
//! s_n - phi_c(w+)                                                        = 0
//! s_t,k - (d_k^T J_c w+ + gamma)                                          = 0
//! s_f - (mu lambda_n - sum_k lambda_t,k)                                  = 0
//! s_i lambda_i - rho                                                      = 0
//! ```
//!
//! Frictionless contacts keep only `lambda_n, s_n`.

use nalgebra::{DMatrix, DVector, Vector3};

/// One contact point of the limb.
/// Largest relative velocity change polishing may make.
const POLISH_RADIUS: f64 = 1e-2;

#[derive(Clone, Debug)]
pub(crate) struct ContactRow {
    /// Contact-point world velocity is `jac * w` (3 x k).
    pub jac: DMatrix<f64>,
    pub normal: Vector3<f64>,
    /// Pyramid directions `[t1, -t1, t2, -t2]`.
    pub dirs: [Vector3<f64>; 4],
    pub mu: f64,
}

impl ContactRow {
    pub fn frictional(&self) -> bool {
        self.mu > 0.0
    }

    pub fn block(&self) -> usize {
        if self.frictional() {
            12
        } else {
            2
        }
    }

    pub fn pyramid(t1: Vector3<f64>, t2: Vector3<f64>) -> [Vector3<f64>; 4] {
        [t1, -t1, t2, -t2]
    }
}

/// Gap values `phi(w+)` (one per contact) and their gradient w.r.t. `w+`.
pub(crate) trait GapModel {
    fn eval(&self, w: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
}

/// `phi = offset + grad * w`.
pub(crate) struct AffineGap {
    pub offset: DVector<f64>,
    pub grad: DMatrix<f64>,
}

impl GapModel for AffineGap {
    fn eval(&self, w: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (&self.offset + &self.grad * w, self.grad.clone())
    }
}

pub(crate) struct LimbProblem<'a> {
    pub mass: DMatrix<f64>,
    pub w_free: DVector<f64>,
    /// `h * weight`: converts normalized force into impulse.
    pub scale: f64,
    pub rows: Vec<ContactRow>,
    pub gap: &'a dyn GapModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum AxisMode {
    Pos,
    Neg,
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ContactMode {
    Separated,
    Stick([AxisMode; 2]),
    Slide([AxisMode; 2]),
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct IpOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub fraction_to_boundary: f64,
}

impl Default for IpOptions {
    fn default() -> Self {
        IpOptions {
            tol: 1e-10,
            max_iter: 100,
            fraction_to_boundary: 0.995,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct IpOutcome {
    pub y: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

const MODE_TOL: f64 = 1e-9;

impl<'a> LimbProblem<'a> {
    pub fn k(&self) -> usize {
        self.w_free.len()
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut at = self.k();
        self.rows
            .iter()
            .map(|r| {
                let o = at;
                at += r.block();
                o
            })
            .collect()
    }

    pub fn n(&self) -> usize {
        self.k() + self.rows.iter().map(|r| r.block()).sum::<usize>()
    }

    /// `(s index, lambda index)` for every complementarity pair.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = vec![];
        for (r, o) in self.rows.iter().zip(self.offsets()) {
            if r.frictional() {
                for j in 0..6 {
                    out.push((o + 6 + j, o + j));
                }
            } else {
                out.push((o + 1, o));
            }
        }
        out
    }

    /// Generalized contact force `sum_c J_c^T (n lambda_n + D lambda_t)` (normalized).
    pub fn generalized_force(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut f = DVector::zeros(self.k());
        for (r, o) in self.rows.iter().zip(self.offsets()) {
            let fw = self.contact_force(r, o, y);
            f += r.jac.transpose() * DVector::from_column_slice(fw.as_slice());
        }
        f
    }

    fn contact_force(&self, r: &ContactRow, o: usize, y: &DVector<f64>) -> Vector3<f64> {
        let mut fw = r.normal * y[o];
        if r.frictional() {
            for (k, d) in r.dirs.iter().enumerate() {
                fw += d * y[o + 1 + k];
            }
        }
        fw
    }

    /// Normalized world contact force for contact `c`.
    pub fn force_of(&self, c: usize, y: &DVector<f64>) -> Vector3<f64> {
        let o = self.offsets()[c];
        self.contact_force(&self.rows[c], o, y)
    }

    pub fn residual(&self, y: &DVector<f64>, rho: f64) -> DVector<f64> {
        let k = self.k();
        let w = y.rows(0, k).into_owned();
        let mut out = DVector::zeros(self.n());
        let dyn_rows = &self.mass * (&w - &self.w_free) / self.scale - self.generalized_force(y);
        out.rows_mut(0, k).copy_from(&dyn_rows);
        let (phi, _) = self.gap.eval(&w);
        for (c, (r, o)) in self.rows.iter().zip(self.offsets()).enumerate() {
            if r.frictional() {
                out[o] = y[o + 6] - phi[c];
                let vc = &r.jac * &w;
                let vc = Vector3::new(vc[0], vc[1], vc[2]);
                for (j, d) in r.dirs.iter().enumerate() {
                    out[o + 1 + j] = y[o + 7 + j] - (d.dot(&vc) + y[o + 5]);
                }
                let sum_t: f64 = (1..5).map(|j| y[o + j]).sum();
                out[o + 5] = y[o + 11] - (r.mu * y[o] - sum_t);
                for j in 0..6 {
                    out[o + 6 + j] = y[o + 6 + j] * y[o + j] - rho;
                }
            } else {
                out[o] = y[o + 1] - phi[c];
                out[o + 1] = y[o + 1] * y[o] - rho;
            }
        }
        out
    }

    pub fn jacobian(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let k = self.k();
        let n = self.n();
        let w = y.rows(0, k).into_owned();
        let mut jm = DMatrix::zeros(n, n);
        jm.view_mut((0, 0), (k, k)).copy_from(&(&self.mass / self.scale));
        let (_, dphi) = self.gap.eval(&w);
        for (c, (r, o)) in self.rows.iter().zip(self.offsets()).enumerate() {
            let jt = r.jac.transpose();
            let jn = &jt * DVector::from_column_slice(r.normal.as_slice());
            for i in 0..k {
                jm[(i, o)] -= jn[i];
            }
            if r.frictional() {
                for (j, d) in r.dirs.iter().enumerate() {
                    let jd = &jt * DVector::from_column_slice(d.as_slice());
                    for i in 0..k {
                        jm[(i, o + 1 + j)] -= jd[i];
                        // tangential row: -d^T J
                        jm[(o + 1 + j, i)] -= jd[i];
                    }
                    jm[(o + 1 + j, o + 7 + j)] = 1.0;
                    jm[(o + 1 + j, o + 5)] = -1.0;
                }
                jm[(o, o + 6)] = 1.0;
                for i in 0..k {
                    jm[(o, i)] = -dphi[(c, i)];
                }
                jm[(o + 5, o + 11)] = 1.0;
                jm[(o + 5, o)] = -r.mu;
                for j in 1..5 {
                    jm[(o + 5, o + j)] = 1.0;
                }
                for j in 0..6 {
                    jm[(o + 6 + j, o + 6 + j)] = y[o + j];
                    jm[(o + 6 + j, o + j)] = y[o + 6 + j];
                }
            } else {
                jm[(o, o + 1)] = 1.0;
                for i in 0..k {
                    jm[(o, i)] = -dphi[(c, i)];
                }
                jm[(o + 1, o + 1)] = y[o];
                jm[(o + 1, o)] = y[o + 1];
            }
        }
        jm
    }

    /// Strictly interior starting point.
    pub fn initial_guess(&self, rho: f64) -> DVector<f64> {
        let kappa = rho.sqrt().max(1e-3);
        let mut y = DVector::from_element(self.n(), kappa);
        y.rows_mut(0, self.k()).copy_from(&self.w_free);
        let (phi, _) = self.gap.eval(&self.w_free);
        for (c, (r, o)) in self.rows.iter().zip(self.offsets()).enumerate() {
            let s_n = if r.frictional() { o + 6 } else { o + 1 };
            y[s_n] = phi[c].max(kappa);
            if r.frictional() {
                y[o + 5] = 1.0;
                let vc = &r.jac * &self.w_free;
                for (j, d) in r.dirs.iter().enumerate() {
                    let v = d.x * vc[0] + d.y * vc[1] + d.z * vc[2];
                    y[o + 7 + j] = (v + 1.0).max(kappa);
                }
            }
        }
        y
    }

    /// Path-following Newton iteration onto the central path at `rho`.
    pub fn solve_relaxed(&self, rho: f64, init: Option<&DVector<f64>>, opts: &IpOptions) -> IpOutcome {
        let pairs = self.pairs();
        let mut y = match init {
            Some(y0) if y0.len() == self.n() && pairs.iter().all(|&(s, l)| y0[s] > 0.0 && y0[l] > 0.0) => {
                y0.clone()
            }
            _ => self.initial_guess(rho),
        };
        if pairs.is_empty() {
            // No contacts: w+ = w_free.
            let r = self.residual(&y, rho);
            let lu = self.jacobian(&y).lu();
            if let Some(dy) = lu.solve(&(-r)) {
                y += dy;
            }
            let residual = inf(&self.residual(&y, rho));
            return IpOutcome { y, iterations: 1, residual, converged: residual <= opts.tol };
        }
        let mut iterations = 0;
        loop {
            let final_res = inf(&self.residual(&y, rho));
            if final_res <= opts.tol {
                return IpOutcome { y, iterations, residual: final_res, converged: true };
            }
            if iterations >= opts.max_iter {
                return IpOutcome { y, iterations, residual: final_res, converged: false };
            }
            iterations += 1;
            let mean_comp = pairs.iter().map(|&(s, l)| y[s] * y[l]).sum::<f64>() / pairs.len() as f64;
            let target = if mean_comp > 10.0 * rho { (0.1 * mean_comp).max(rho) } else { rho };
            let r = self.residual(&y, target);
            let Some(dy) = self.jacobian(&y).lu().solve(&(-&r)) else {
                return IpOutcome { y, iterations, residual: final_res, converged: false };
            };
            let mut alpha: f64 = 1.0;
            for &(s, l) in &pairs {
                for idx in [s, l] {
                    if dy[idx] < 0.0 {
                        alpha = alpha.min(-opts.fraction_to_boundary * y[idx] / dy[idx]);
                    }
                }
            }
            let r0 = r.norm();
            let mut accepted = false;
            for _ in 0..30 {
                let trial = &y + &dy * alpha;
                if self.residual(&trial, target).norm() <= (1.0 - 1e-4 * alpha) * r0 {
                    y = trial;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                y += &dy * alpha;
            }
        }
    }

    fn pair_active_flags(&self, modes: &[ContactMode]) -> Vec<bool> {
        let mut flags = vec![];
        for (r, m) in self.rows.iter().zip(modes) {
            if !r.frictional() {
                flags.push(!matches!(m, ContactMode::Separated));
                continue;
            }
            let (normal, axes, slide) = match *m {
                ContactMode::Separated => (false, [AxisMode::Free; 2], false),
                ContactMode::Stick(a) => (true, a, false),
                ContactMode::Slide(a) => (true, a, true),
            };
            flags.push(normal);
            for a in axes {
                flags.push(a == AxisMode::Pos);
                flags.push(a == AxisMode::Neg);
            }
            flags.push(slide);
        }
        flags
    }

    /// Solves the equality system of a fixed contact mode: each pair keeps
    /// either `s = 0` (lambda active) or `lambda = 0`.
    pub fn solve_mode(&self, modes: &[ContactMode], init: &DVector<f64>) -> Option<DVector<f64>> {
        let pairs = self.pairs();
        let flags = self.pair_active_flags(modes);
        let mut y = init.clone();
        for (&(s, l), &active) in pairs.iter().zip(&flags) {
            if active {
                y[s] = 0.0;
            } else {
                y[l] = 0.0;
            }
        }
        let fixed = |y: &DVector<f64>| {
            let mut r = self.residual(y, 0.0);
            for (row, (&(s, l), &active)) in self.comp_rows().into_iter().zip(pairs.iter().zip(&flags)) {
                r[row] = if active { y[s] } else { y[l] };
            }
            r
        };
        for _ in 0..20 {
            let r = fixed(&y);
            if inf(&r) <= 1e-13 {
                return Some(y);
            }
            let mut jm = self.jacobian(&y);
            for (row, (&(s, l), &active)) in self.comp_rows().into_iter().zip(pairs.iter().zip(&flags)) {
                jm.row_mut(row).fill(0.0);
                jm[(row, if active { s } else { l })] = 1.0;
            }
            let dy = jm.lu().solve(&(-r))?;
            y += dy;
        }
        (inf(&fixed(&y)) <= 1e-10).then_some(y)
    }

    fn comp_rows(&self) -> Vec<usize> {
        let mut out = vec![];
        for (r, o) in self.rows.iter().zip(self.offsets()) {
            if r.frictional() {
                out.extend((0..6).map(|j| o + 6 + j));
            } else {
                out.push(o + 1);
            }
        }
        out
    }

    /// Checks sign conditions of a mode solution; separated contacts get
    /// their (physically irrelevant) friction slacks recomputed.
    pub fn finish_mode(&self, modes: &[ContactMode], y: &mut DVector<f64>) -> bool {
        let k = self.k();
        let w = y.rows(0, k).into_owned();
        for ((r, o), m) in self.rows.iter().zip(self.offsets()).zip(modes) {
            if !r.frictional() {
                if y[o] < -MODE_TOL || y[o + 1] < -MODE_TOL {
                    return false;
                }
                continue;
            }
            if *m == ContactMode::Separated {
                if y[o + 6] < -MODE_TOL {
                    return false;
                }
                let vc = &r.jac * &w;
                let vc = Vector3::new(vc[0], vc[1], vc[2]);
                let gamma = r.dirs.iter().map(|d| -d.dot(&vc)).fold(0.0_f64, f64::max);
                y[o + 5] = gamma;
                for (j, d) in r.dirs.iter().enumerate() {
                    y[o + 7 + j] = d.dot(&vc) + gamma;
                }
                y[o + 11] = 0.0;
                continue;
            }
            if (0..12).any(|j| y[o + j] < -MODE_TOL) {
                return false;
            }
        }
        for v in y.rows_mut(k, self.n() - k).iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        true
    }

    /// Mode suggested by a relaxed (central-path) solution.
    pub fn infer_modes(&self, y: &DVector<f64>) -> Vec<ContactMode> {
        self.rows
            .iter()
            .zip(self.offsets())
            .map(|(r, o)| {
                if !r.frictional() {
                    return if y[o] > y[o + 1] {
                        ContactMode::Stick([AxisMode::Free; 2])
                    } else {
                        ContactMode::Separated
                    };
                }
                if y[o] <= y[o + 6] {
                    return ContactMode::Separated;
                }
                let slide = y[o + 5] > y[o + 11];
                let axis = |a: usize| {
                    let (lp, ln) = (y[o + 1 + 2 * a], y[o + 2 + 2 * a]);
                    let (sp, sn) = (y[o + 7 + 2 * a], y[o + 8 + 2 * a]);
                    if slide {
                        match (lp > sp, ln > sn) {
                            (true, false) => AxisMode::Pos,
                            (false, true) => AxisMode::Neg,
                            (true, true) if lp >= ln => AxisMode::Pos,
                            (true, true) => AxisMode::Neg,
                            _ => AxisMode::Free,
                        }
                    } else if ln > lp {
                        AxisMode::Neg
                    } else {
                        AxisMode::Pos
                    }
                };
                let axes = [axis(0), axis(1)];
                if slide {
                    ContactMode::Slide(axes)
                } else {
                    ContactMode::Stick(axes)
                }
            })
            .collect()
    }

    fn candidate_modes(r: &ContactRow) -> Vec<ContactMode> {
        if !r.frictional() {
            return vec![ContactMode::Separated, ContactMode::Stick([AxisMode::Free; 2])];
        }
        let axes = [AxisMode::Pos, AxisMode::Neg, AxisMode::Free];
        let mut out = vec![ContactMode::Separated];
        for slide in [false, true] {
            for a in axes {
                for b in axes {
                    out.push(if slide { ContactMode::Slide([a, b]) } else { ContactMode::Stick([a, b]) });
                }
            }
        }
        out
    }

    /// Exact-complementarity solution near a relaxed one: tries the inferred
    /// mode first, then every canonical mode in a fixed order.
    pub fn polish(&self, relaxed: &DVector<f64>) -> Option<(DVector<f64>, Vec<ContactMode>)> {
        if self.rows.is_empty() {
            return Some((relaxed.clone(), vec![]));
        }
        let inferred = self.infer_modes(relaxed);
        if let Some(y) = self.try_mode(&inferred, relaxed) {
            return Some((y, inferred));
        }
        let per_contact: Vec<Vec<ContactMode>> = self.rows.iter().map(Self::candidate_modes).collect();
        let mut idx = vec![0usize; self.rows.len()];
        loop {
            let modes: Vec<ContactMode> = idx.iter().zip(&per_contact).map(|(&i, c)| c[i]).collect();
            if modes != inferred {
                if let Some(y) = self.try_mode(&modes, relaxed) {
                    return Some((y, modes));
                }
            }
            let mut c = 0;
            loop {
                if c == idx.len() {
                    return None;
                }
                idx[c] += 1;
                if idx[c] < per_contact[c].len() {
                    break;
                }
                idx[c] = 0;
                c += 1;
            }
        }
    }

    /// Mode solutions far from the relaxed velocities are rejected: with a
    /// rotating foot the exact gap has spurious roots (whole turns).
    fn try_mode(&self, modes: &[ContactMode], init: &DVector<f64>) -> Option<DVector<f64>> {
        let mut y = self.solve_mode(modes, init)?;
        let k = self.k();
        let w0 = init.rows(0, k);
        if !y.iter().all(|v| v.is_finite()) || !((y.rows(0, k) - w0).amax() <= POLISH_RADIUS * (1.0 + w0.amax())) {
            return None;
        }
        self.finish_mode(modes, &mut y).then_some(y)
    }
}

fn inf(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}
