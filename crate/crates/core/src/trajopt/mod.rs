//! Contact-implicit trajectory optimization: tracks a reference state
//! sequence through the contact dynamics, so the contact schedule falls out
//! of the solution instead of being prescribed.
//!
//! The problem is solved by iterative LQR over the relaxed step map. Each
//! relaxation level is solved to stationarity and used to warm start the
//! next; the final controls are replayed through the exact contact step, so
//! the returned trajectory satisfies the dynamics to round-off.

mod boxqp;
mod ilqr;

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::contact::{complementarity_residual, step_with_forces, ContactForce};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, State};
use crate::terrain::TerrainModel;

pub(crate) use boxqp::solve as box_qp;
pub use ilqr::reduced_gradient;

/// Diagonal weights on `x - x*`, on `u`, and on the terminal state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingWeights {
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub q_n: Vec<f64>,
}

/// Per-group weights from which the diagonals are built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightPreset {
    pub body_position: f64,
    pub body_orientation: f64,
    pub limb_position: f64,
    pub limb_orientation: f64,
    pub velocity: f64,
    pub control: f64,
    /// `Q_N = terminal_factor * Q`.
    pub terminal_factor: f64,
}

impl Default for WeightPreset {
    fn default() -> Self {
        WeightPreset {
            body_position: 10.0,
            body_orientation: 5.0,
            limb_position: 20.0,
            limb_orientation: 5.0,
            velocity: 0.1,
            control: 1e-3,
            terminal_factor: 10.0,
        }
    }
}

impl TrackingWeights {
    pub fn from_preset(model: &ModelSpec, p: &WeightPreset) -> Self {
        let mut q = vec![p.velocity; model.n_x()];
        for k in 0..3 {
            q[k] = p.body_position;
            q[3 + k] = p.body_orientation;
        }
        for lay in model.limb_layouts() {
            for k in 0..3 {
                q[lay.q + k] = p.limb_position;
                if lay.dofs == 6 {
                    q[lay.q + 3 + k] = p.limb_orientation;
                }
            }
        }
        let q_n = q.iter().map(|w| w * p.terminal_factor).collect();
        TrackingWeights {
            q,
            r: vec![p.control; model.n_u],
            q_n,
        }
    }

    pub fn default_for(model: &ModelSpec) -> Self {
        Self::from_preset(model, &WeightPreset::default())
    }

    pub fn scaled(&self, c: f64) -> Self {
        let m = |v: &Vec<f64>| v.iter().map(|w| w * c).collect();
        TrackingWeights {
            q: m(&self.q),
            r: m(&self.r),
            q_n: m(&self.q_n),
        }
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        for (name, v, n) in [("Q", &self.q, model.n_x()), ("R", &self.r, model.n_u), ("Q_N", &self.q_n, model.n_x())] {
            if v.len() != n {
                return Err(Error::dim(name, n, v.len()));
            }
            if v.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                return Err(Error::invalid(name, "weights must be finite and >= 0"));
            }
        }
        if self.max_entry() <= 0.0 {
            return Err(Error::invalid("weights", "at least one weight must be positive"));
        }
        Ok(())
    }

    pub(crate) fn max_entry(&self) -> f64 {
        self.q.iter().chain(&self.r).chain(&self.q_n).copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajOptConfig {
    /// Relaxation levels, solved in order; the last one defines the
    /// stationarity conditions of the result.
    pub rho_schedule: Vec<f64>,
    /// Iteration cap per relaxation level.
    pub max_iterations: usize,
    /// A level is converged when the predicted decrease falls below this
    /// fraction of the cost.
    pub cost_tolerance: f64,
    /// Allowed dynamics defect and complementarity residual of the result.
    pub dynamics_tolerance: f64,
    pub optimize_h: bool,
    /// `[h_min, h_max]` as multiples of the nominal step.
    pub h_bounds: [f64; 2],
    /// Weight of `((h - h_nom) / h_nom)^2`, relative to the largest tracking
    /// weight.
    pub h_penalty: f64,
    /// Contacts with normal force above this fraction of the total weight
    /// count as active in the schedule.
    pub contact_force_fraction: f64,
    /// What the control weight `R` penalizes deviation from.
    pub control_baseline: ControlBaseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlBaseline {
    /// `u_t' R u_t`.
    Zero,
    /// `(u_t - g_t)' R (u_t - g_t)` with `g_t` the gravity-compensating
    /// control of the reference stance at step `t`.
    #[default]
    GravityCompensation,
}

impl Default for TrajOptConfig {
    fn default() -> Self {
        TrajOptConfig {
            rho_schedule: vec![1e-3, 1e-4, 1e-5, 1e-6],
            max_iterations: 100,
            cost_tolerance: 1e-7,
            dynamics_tolerance: 1e-6,
            optimize_h: true,
            h_bounds: [0.5, 1.5],
            h_penalty: 1.0,
            contact_force_fraction: 0.01,
            control_baseline: ControlBaseline::default(),
        }
    }
}

impl TrajOptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho_schedule.is_empty() || self.rho_schedule.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::invalid("rho_schedule", "must be a non-empty list of positive values"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be >= 1"));
        }
        let [lo, hi] = self.h_bounds;
        if lo > hi {
            return Err(Error::invalid("h_bounds", format!("h_min {lo} exceeds h_max {hi}")));
        }
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
            return Err(Error::invalid("h_bounds", "need 0 < h_min <= 1 <= h_max"));
        }
        for (field, v) in [
            ("cost_tolerance", self.cost_tolerance),
            ("dynamics_tolerance", self.dynamics_tolerance),
            ("h_penalty", self.h_penalty),
            ("contact_force_fraction", self.contact_force_fraction),
        ] {
            if !(v >= 0.0) {
                return Err(Error::invalid(field, "must be >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajOptProblem {
    pub model: ModelSpec,
    pub terrain: TerrainModel,
    /// `x*_1 .. x*_T`.
    pub reference: Vec<State>,
    /// s.
    pub h_nom: f64,
    pub weights: TrackingWeights,
    /// Pinned first state; the first reference state when absent.
    pub initial_state: Option<State>,
    pub config: TrajOptConfig,
}

impl TrajOptProblem {
    pub fn new(model: ModelSpec, terrain: TerrainModel, reference: Vec<State>, h_nom: f64) -> Self {
        let weights = TrackingWeights::default_for(&model);
        TrajOptProblem {
            model,
            terrain,
            reference,
            h_nom,
            weights,
            initial_state: None,
            config: TrajOptConfig::default(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.reference.len()
    }

    pub fn h_min(&self) -> f64 {
        self.config.h_bounds[0] * self.h_nom
    }

    pub fn h_max(&self) -> f64 {
        self.config.h_bounds[1] * self.h_nom
    }

    pub fn first_state(&self) -> &State {
        self.initial_state.as_ref().unwrap_or(&self.reference[0])
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.terrain.validate()?;
        self.config.validate()?;
        self.weights.validate(&self.model)?;
        if self.reference.len() < 2 {
            return Err(Error::invalid("reference", "needs T >= 2 states"));
        }
        if !(self.h_nom > 0.0 && self.h_nom.is_finite()) {
            return Err(Error::invalid("h_nom", "must be > 0"));
        }
        for s in &self.reference {
            self.model.check_state(s)?;
        }
        if let Some(s) = &self.initial_state {
            self.model.check_state(s)?;
        }
        Ok(())
    }

    /// Gravity-compensating controls for the limbs within 1 cm of the
    /// ground in each reference state.
    pub fn initial_controls(&self) -> Vec<DVector<f64>> {
        self.reference[..self.reference.len() - 1]
            .iter()
            .map(|s| {
                let pts = self.model.contact_points(&s.q);
                let supporting: Vec<bool> = (0..self.model.limbs.len())
                    .map(|l| {
                        pts.iter()
                            .filter(|p| p.limb == l)
                            .any(|p| self.terrain.signed_distance(&p.position) < 0.01)
                    })
                    .collect();
                self.model.gravity_compensation(&supporting)
            })
            .collect()
    }

    pub fn control_baseline(&self) -> Vec<DVector<f64>> {
        match self.config.control_baseline {
            ControlBaseline::Zero => vec![DVector::zeros(self.model.n_u); self.horizon() - 1],
            ControlBaseline::GravityCompensation => self.initial_controls(),
        }
    }

    pub(crate) fn h_weight(&self) -> f64 {
        if self.config.optimize_h {
            self.config.h_penalty * self.weights.max_entry() / (self.h_nom * self.h_nom)
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// Iteration cap hit; the best iterate is returned.
    MaxIterations,
    /// Built from data rather than solved.
    Unsolved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    /// Step lengths `h_1 .. h_{T-1}`, s.
    pub h: Vec<f64>,
    pub states: Vec<State>,
    #[serde(with = "crate::util::serde_dvec_seq")]
    pub controls: Vec<DVector<f64>>,
    /// Contact forces of each step, N.
    pub forces: Vec<Vec<ContactForce>>,
    pub cost: f64,
    /// Projected gradient of the relaxed objective, infinity norm.
    pub kkt_residual: f64,
    pub max_dynamics_defect: f64,
    pub max_complementarity: f64,
    /// Smallest signed distance over all contacts and states, m.
    pub min_gap: f64,
    pub contact_names: Vec<String>,
    /// `[step][contact]`: normal force above the threshold.
    pub contact_schedule: Vec<Vec<bool>>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub rho: f64,
}

impl ReferenceTrajectory {
    /// States taken as they are, with zero controls and forces.
    pub fn from_states(model: &ModelSpec, states: Vec<State>, h: f64) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::invalid("states", "need at least 2"));
        }
        let n = states.len() - 1;
        let nc = model.n_contacts();
        Ok(ReferenceTrajectory {
            h: vec![h; n],
            states,
            controls: vec![DVector::zeros(model.n_u); n],
            forces: vec![vec![ContactForce::default(); nc]; n],
            cost: f64::NAN,
            kkt_residual: f64::NAN,
            max_dynamics_defect: f64::NAN,
            max_complementarity: f64::NAN,
            min_gap: f64::NAN,
            contact_names: model.contact_names(),
            contact_schedule: vec![vec![false; nc]; n],
            status: SolveStatus::Unsolved,
            iterations: 0,
            rho: 0.0,
        })
    }

    pub fn steps(&self) -> usize {
        self.h.len()
    }

    pub fn times(&self) -> Vec<f64> {
        let mut t = vec![0.0];
        for h in &self.h {
            t.push(t.last().unwrap() + h);
        }
        t
    }

    pub fn is_flagged(&self) -> bool {
        self.status != SolveStatus::Converged
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::util::read_json(path.as_ref())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::util::write_json(path.as_ref(), self)
    }
}

/// `sum_t (h_t/2) [e_t'Q e_t + d_t'R d_t] + e_T'Q_N e_T`, with `d_t` the
/// control minus its baseline, plus the step length penalty when step
/// lengths are optimized.
pub fn evaluate_objective(problem: &TrajOptProblem, candidate: &ReferenceTrajectory) -> Result<f64> {
    let t = problem.horizon();
    if candidate.states.len() != t {
        return Err(Error::dim("states", t, candidate.states.len()));
    }
    if candidate.controls.len() != t - 1 || candidate.h.len() != t - 1 {
        return Err(Error::dim("controls", t - 1, candidate.controls.len()));
    }
    let states: Vec<DVector<f64>> = candidate.states.iter().map(State::to_vector).collect();
    Ok(ilqr::total_cost(&ilqr::Ctx::new(problem), &states, &candidate.controls, &candidate.h))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsReport {
    /// Per step: `|x_{t+1} - step(x_t, u_t, lambda_t)|_inf`.
    pub defects: Vec<f64>,
    pub complementarity: Vec<f64>,
    pub max_defect: f64,
    pub max_complementarity: f64,
    pub passed: bool,
}

/// Replays every step with the trajectory's own forces.
pub fn check_dynamics_feasibility(
    trajectory: &ReferenceTrajectory,
    model: &ModelSpec,
    terrain: &TerrainModel,
    tol: f64,
) -> Result<DynamicsReport> {
    let n = trajectory.steps();
    if trajectory.states.len() != n + 1 || trajectory.controls.len() != n || trajectory.forces.len() != n {
        return Err(Error::dim("trajectory", n + 1, trajectory.states.len()));
    }
    let mut defects = Vec::with_capacity(n);
    let mut complementarity = Vec::with_capacity(n);
    for t in 0..n {
        let (x, next) = (&trajectory.states[t], &trajectory.states[t + 1]);
        let pred = step_with_forces(model, terrain, trajectory.h[t], x, &trajectory.controls[t], &trajectory.forces[t])?;
        defects.push((pred.to_vector() - next.to_vector()).amax());
        complementarity.push(complementarity_residual(model, terrain, (x, next), &trajectory.forces[t])?);
    }
    let max_defect = defects.iter().copied().fold(0.0, f64::max);
    let max_complementarity = complementarity.iter().copied().fold(0.0, f64::max);
    Ok(DynamicsReport {
        passed: max_defect <= tol && max_complementarity <= tol,
        defects,
        complementarity,
        max_defect,
        max_complementarity,
    })
}

/// `[step][contact]`: normal force strictly above `force_threshold` (N).
pub fn extract_contact_schedule(trajectory: &ReferenceTrajectory, force_threshold: f64) -> Vec<Vec<bool>> {
    trajectory
        .forces
        .iter()
        .map(|fs| fs.iter().map(|f| f.normal > force_threshold).collect())
        .collect()
}

pub fn solve_reference(problem: &TrajOptProblem) -> Result<ReferenceTrajectory> {
    problem.validate()?;
    ilqr::solve(problem)
}
