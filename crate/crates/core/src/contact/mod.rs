//! Rigid contact time stepping with a linearized friction pyramid.
//!
//! Forces inside the solver are normalized by the total robot weight and
//! gaps are in metres, so every residual mixes dimensionless force terms
//! with metre-valued gap terms on the same scale.

mod lcp;
mod limb;
mod oracle;
mod spring;
mod step;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, State};
use crate::terrain::TerrainModel;
use crate::util::seg3;

pub use lcp::{linearize_step, LcpContact, LcpStep, LinearizedStepModel};
pub use oracle::contact_mode_oracle;
pub use spring::step_spring_damper;
pub use step::{step_ncp, step_relaxed, RelaxedStep, step_with_forces};

/// Force at one contact point. Tangential components act along the pyramid
/// directions `[+t1, -t1, +t2, -t2]` of the terrain tangent basis.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContactForce {
    /// N
    pub normal: f64,
    /// N, each >= 0
    pub tangential: [f64; 4],
    /// Sliding-velocity slack, m/s.
    pub gamma: f64,
}

impl ContactForce {
    pub fn tangential_sum(&self) -> f64 {
        self.tangential.iter().sum()
    }

    /// World-frame force given the contact frame.
    pub fn world(&self, normal: &Vector3<f64>, t1: &Vector3<f64>, t2: &Vector3<f64>) -> Vector3<f64> {
        let [a, b, c, d] = self.tangential;
        normal * self.normal + t1 * (a - b) + t2 * (c - d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub next_state: State,
    pub forces: Vec<ContactForce>,
    /// Result of [`complementarity_residual`] on the returned step.
    pub residual: f64,
    pub iterations: usize,
    /// Largest complementarity product after each continuation stage.
    #[serde(default)]
    pub stage_residuals: Vec<f64>,
}

/// Continuation of the complementarity relaxation `s * lambda = rho`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelaxationSchedule {
    pub rho_start: f64,
    pub rho_end: f64,
    pub decay: f64,
    /// Inner Newton tolerance on the relaxed residual, per stage.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// A step is accepted when its complementarity residual is below this.
    pub accept_tolerance: f64,
    /// Snap the final relaxed solution onto an exact contact mode.
    pub polish: bool,
}

impl Default for RelaxationSchedule {
    fn default() -> Self {
        RelaxationSchedule {
            rho_start: 1e-1,
            rho_end: 1e-6,
            decay: 0.2,
            tolerance: 1e-10,
            max_iterations: 100,
            accept_tolerance: 1e-6,
            polish: true,
        }
    }
}

impl RelaxationSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_end > 0.0) {
            return Err(Error::invalid("rho_end", "must be > 0"));
        }
        if !(self.rho_start >= self.rho_end) {
            return Err(Error::invalid("rho_start", "must be >= rho_end"));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::invalid("decay", "must lie in (0, 1)"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("tolerance", "must be > 0"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be >= 1"));
        }
        if !(self.accept_tolerance > 0.0) {
            return Err(Error::invalid("accept_tolerance", "must be > 0"));
        }
        Ok(())
    }

    /// Relaxation values of every stage, ending exactly at `rho_end`.
    pub fn stages(&self) -> Vec<f64> {
        let mut out = vec![];
        let mut rho = self.rho_start;
        while rho > self.rho_end * (1.0 + 1e-12) {
            out.push(rho);
            rho *= self.decay;
        }
        out.push(self.rho_end);
        out
    }
}

/// Local contact frame at one contact point.
#[derive(Clone, Debug)]
pub(crate) struct ContactFrame {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub t1: Vector3<f64>,
    pub t2: Vector3<f64>,
    pub mu: f64,
}

pub(crate) fn contact_frames(model: &ModelSpec, terrain: &TerrainModel, q: &nalgebra::DVector<f64>) -> Vec<ContactFrame> {
    model
        .contact_points(q)
        .into_iter()
        .map(|c| {
            let (t1, t2) = terrain.tangent_basis(&c.position);
            ContactFrame {
                position: c.position,
                normal: terrain.surface_normal(&c.position),
                t1,
                t2,
                mu: terrain.friction_at(&c.position, model.friction_coefficient),
            }
        })
        .collect()
}

/// World velocity of every contact point.
pub(crate) fn contact_velocities(model: &ModelSpec, q: &nalgebra::DVector<f64>, v: &nalgebra::DVector<f64>) -> Vec<Vector3<f64>> {
    let mut out = vec![];
    for (limb, lay) in model.limbs.iter().zip(model.limb_layouts()) {
        let lin = seg3(v, lay.q);
        for off in &limb.contact_offsets {
            if limb.is_rigid() {
                let r = crate::mrp::rotation(&seg3(q, lay.q + 3));
                let w = seg3(v, lay.q + 3);
                out.push(lin + r * w.cross(&crate::util::vec3(off)));
            } else {
                out.push(lin);
            }
        }
    }
    out
}

/// Largest violation of the contact conditions over all contacts: gap times
/// normal force, penetration, negative forces, friction-pyramid excess and
/// the tangential and sliding complementarity products. Forces enter
/// normalized by the total weight.
///
/// The tangential terms use the contact frame and velocity Jacobian at the
/// start of the step and the velocities of the end state.
pub fn complementarity_residual(
    model: &ModelSpec,
    terrain: &TerrainModel,
    state_pair: (&State, &State),
    forces: &[ContactForce],
) -> Result<f64> {
    let (before, after) = state_pair;
    model.check_state(before)?;
    model.check_state(after)?;
    if forces.len() != model.n_contacts() {
        return Err(Error::dim("forces", model.n_contacts(), forces.len()));
    }
    let w = model.weight();
    let frames = contact_frames(model, terrain, &before.q);
    let points = model.contact_points(&after.q);
    let vel = contact_velocities(model, &before.q, &after.v);
    let mut worst: f64 = 0.0;
    for (((f, fr), p), vc) in forces.iter().zip(&frames).zip(&points).zip(&vel) {
        let phi = terrain.signed_distance(&p.position);
        let ln = f.normal / w;
        let lt: Vec<f64> = f.tangential.iter().map(|x| x / w).collect();
        let sum_t: f64 = lt.iter().sum();
        worst = worst.max((phi * ln).abs()).max(-phi).max(-ln);
        if fr.mu > 0.0 {
            let dirs = [fr.t1, -fr.t1, fr.t2, -fr.t2];
            let slack_f = fr.mu * ln - sum_t;
            worst = worst.max(-slack_f).max(-f.gamma).max((f.gamma * slack_f).abs());
            for (l, d) in lt.iter().zip(dirs) {
                let s = d.dot(vc) + f.gamma;
                worst = worst.max(-l).max(-s).max((l * s).abs());
            }
        } else {
            worst = worst.max(sum_t.abs());
        }
    }
    Ok(worst.max(0.0))
}

pub(crate) fn check_step_inputs(model: &ModelSpec, h: f64, state: &State, control: &nalgebra::DVector<f64>) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("h", "must be > 0"));
    }
    model.check_state(state)?;
    if !state.is_finite() {
        return Err(Error::invalid("state", "must be finite"));
    }
    if control.len() != model.n_u {
        return Err(Error::dim("control", model.n_u, control.len()));
    }
    if control.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("control", "must be finite"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_stages() {
        let s = RelaxationSchedule::default().stages();
        assert_eq!(s.first(), Some(&0.1));
        assert_eq!(s.last(), Some(&1e-6));
        assert!(s.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn schedule_validation() {
        assert!(RelaxationSchedule { decay: 1.0, ..Default::default() }.validate().is_err());
        assert!(RelaxationSchedule { rho_start: 1e-8, ..Default::default() }.validate().is_err());
        assert!(RelaxationSchedule::default().validate().is_ok());
    }
}
