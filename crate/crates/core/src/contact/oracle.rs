//! Brute-force contact step for translational single-contact limbs.
//!
//! Each limb is a point mass touching the terrain at one point, so every
//! contact mode has a closed-form impulse. Modes are tried in the order
//! separated, sticking, sliding with the friction impulse along a single
//! pyramid direction (0..4), then sliding on a pyramid face spanned by one
//! `t1` and one `t2` direction; the first mode passing all consistency checks
//! wins.

use nalgebra::{DVector, Vector3};

use super::{check_step_inputs, complementarity_residual, contact_frames, ContactForce, StepResult};
use crate::error::{Error, Result};
use crate::model::{integrate_configuration, rechart_configuration, smooth_dynamics_unchecked, ModelSpec, State};
use crate::terrain::TerrainModel;
use crate::util::{seg3, vec3};

const TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug)]
enum Mode {
    Separated,
    Stick,
    Slide(usize),
    Face(usize, usize),
}

struct Candidate {
    velocity: Vector3<f64>,
    normal_impulse: f64,
    tangential_impulse: [f64; 4],
    gamma: f64,
}

pub fn contact_mode_oracle(
    model: &ModelSpec,
    terrain: &TerrainModel,
    h: f64,
    state: &State,
    control: &DVector<f64>,
) -> Result<StepResult> {
    check_step_inputs(model, h, state, control)?;
    if model.n_contacts() > 4 {
        return Err(Error::invalid("model", "the mode oracle handles at most 4 contact points"));
    }
    if model.limbs.iter().any(|l| l.is_rigid() || l.contact_offsets.len() != 1) {
        return Err(Error::invalid("model", "the mode oracle handles translational single-contact limbs only"));
    }
    let a = smooth_dynamics_unchecked(model, &state.q, &state.v, control);
    let frames = contact_frames(model, terrain, &state.q);
    let mut v_next = &state.v + &a * h;
    let mut forces = vec![];
    let mut tried = 0;
    for ((limb, lay), frame) in model.limbs.iter().zip(model.limb_layouts()).zip(&frames) {
        let p = seg3(&state.q, lay.q) + vec3(&limb.contact_offsets[0]);
        let w_free = seg3(&v_next, lay.q);
        let m = limb.limb_mass;
        let n = frame.normal;
        let dirs = [frame.t1, -frame.t1, frame.t2, -frame.t2];
        let mu = frame.mu;
        let mut modes = vec![Mode::Separated, Mode::Stick];
        if mu > 0.0 {
            modes.extend((0..4).map(Mode::Slide));
            modes.extend([(0, 2), (0, 3), (1, 2), (1, 3)].map(|(a, b)| Mode::Face(a, b)));
        }
        let mut found = None;
        for mode in modes {
            tried += 1;
            if let Some(c) = solve_mode(terrain, h, m, mu, &p, &w_free, &n, &dirs, mode) {
                found = Some(c);
                break;
            }
        }
        let Some(c) = found else {
            return Err(Error::NoConsistentMode { modes_tried: tried });
        };
        for k in 0..3 {
            v_next[lay.q + k] = c.velocity[k];
        }
        forces.push(ContactForce {
            normal: c.normal_impulse / h,
            tangential: c.tangential_impulse.map(|x| x / h),
            gamma: c.gamma,
        });
    }
    let mut q_next = integrate_configuration(model, &state.q, &v_next, h);
    rechart_configuration(model, &mut q_next);
    let next_state = State { q: q_next, v: v_next };
    let residual = complementarity_residual(model, terrain, (state, &next_state), &forces)?;
    Ok(StepResult {
        next_state,
        forces,
        residual,
        iterations: tried,
        stage_residuals: vec![],
    })
}

#[allow(clippy::too_many_arguments)]
fn solve_mode(
    terrain: &TerrainModel,
    h: f64,
    m: f64,
    mu: f64,
    p: &Vector3<f64>,
    w_free: &Vector3<f64>,
    n: &Vector3<f64>,
    dirs: &[Vector3<f64>; 4],
    mode: Mode,
) -> Option<Candidate> {
    let tangential = |w: &Vector3<f64>| w - n * n.dot(w);
    if let Mode::Separated = mode {
        let phi = terrain.signed_distance(&(p + w_free * h));
        return (phi >= -TOL).then(|| Candidate {
            velocity: *w_free,
            normal_impulse: 0.0,
            tangential_impulse: [0.0; 4],
            gamma: separated_gamma(dirs, w_free),
        });
    }
    // Terrain height is read at the landing point; iterate because the
    // landing point depends on the mode's tangential velocity.
    let mut w_t = match mode {
        Mode::Stick if mu > 0.0 => Vector3::zeros(),
        _ => tangential(w_free),
    };
    let mut cand = None;
    for _ in 0..4 {
        let ground = terrain.height((p + w_t * h).x, (p + w_t * h).y);
        let gap_now = (p + w_t * h).z - ground;
        // Normal velocity closing the gap exactly: gap_now + h w_n = 0.
        let w_n = -gap_now / h;
        let pn = m * (w_n - n.dot(w_free));
        let (w_t_new, pt) = match mode {
            Mode::Stick if mu > 0.0 => (Vector3::zeros(), -m * tangential(w_free)),
            Mode::Stick => (tangential(w_free), Vector3::zeros()),
            Mode::Slide(k) => {
                let pt = dirs[k] * (mu * pn);
                (tangential(w_free) + pt / m, pt)
            }
            Mode::Face(i, j) => {
                // Split mu pn between d_i and d_j so that both see the same
                // sliding speed: d_i.w+ = d_j.w+.
                let wf = tangential(w_free);
                let alpha = 0.5 * (mu * pn + m * (dirs[j].dot(&wf) - dirs[i].dot(&wf)));
                let pt = dirs[i] * alpha + dirs[j] * (mu * pn - alpha);
                (wf + pt / m, pt)
            }
            Mode::Separated => unreachable!(),
        };
        cand = Some((w_n, pn, pt, w_t_new));
        let moved = (w_t_new - w_t).norm() * h;
        w_t = w_t_new;
        let ground_new = terrain.height((p + w_t * h).x, (p + w_t * h).y);
        if moved == 0.0 || ground_new == ground {
            break;
        }
    }
    let (w_n, pn, pt, w_t) = cand?;
    let scale = 1.0 + pn.abs();
    if pn < -TOL * scale {
        return None;
    }
    let velocity = n * w_n + w_t;
    let (t1, t2) = (dirs[0], dirs[2]);
    let (p1, p2) = (pt.dot(&t1), pt.dot(&t2));
    let lambda = [p1.max(0.0), (-p1).max(0.0), p2.max(0.0), (-p2).max(0.0)];
    match mode {
        Mode::Stick if mu > 0.0 => {
            if p1.abs() + p2.abs() > mu * pn + TOL * scale {
                return None;
            }
            Some(Candidate {
                velocity,
                normal_impulse: pn,
                tangential_impulse: lambda,
                gamma: 0.0,
            })
        }
        Mode::Stick => Some(Candidate {
            velocity,
            normal_impulse: pn,
            tangential_impulse: [0.0; 4],
            gamma: 0.0,
        }),
        Mode::Slide(k) => {
            let gamma = -dirs[k].dot(&w_t);
            if gamma < -TOL || dirs.iter().any(|d| d.dot(&w_t) + gamma < -TOL) {
                return None;
            }
            let mut tangential_impulse = [0.0; 4];
            tangential_impulse[k] = mu * pn;
            Some(Candidate {
                velocity,
                normal_impulse: pn,
                tangential_impulse,
                gamma: gamma.max(0.0),
            })
        }
        Mode::Face(i, j) => {
            let gamma = -dirs[i].dot(&w_t);
            let (ai, aj) = (pt.dot(&dirs[i]), pt.dot(&dirs[j]));
            if ai < -TOL * scale || aj < -TOL * scale || gamma < -TOL {
                return None;
            }
            if dirs.iter().any(|d| d.dot(&w_t) + gamma < -TOL) {
                return None;
            }
            let mut tangential_impulse = [0.0; 4];
            tangential_impulse[i] = ai.max(0.0);
            tangential_impulse[j] = aj.max(0.0);
            Some(Candidate {
                velocity,
                normal_impulse: pn,
                tangential_impulse,
                gamma: gamma.max(0.0),
            })
        }
        Mode::Separated => unreachable!(),
    }
}

fn separated_gamma(dirs: &[Vector3<f64>; 4], w: &Vector3<f64>) -> f64 {
    dirs.iter().map(|d| -d.dot(w)).fold(0.0, f64::max)
}
