//! Contact-implicit MPC: each control step solves a short-horizon tracking
//! problem over the contact dynamics linearized about the reference, then
//! the first control is applied to the full simulator.
//!
//! Predictions are anchored to the reference: the model's step from
//! `x` is `F_t(x, u) + x*_{t+1} - F_t(x*_t, u*_t)`, so a state on the
//! reference under the reference control stays exactly on it.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::contact::{linearize_step, step_ncp, LcpStep, LinearizedStepModel, RelaxationSchedule};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, State};
use crate::sim::fmt;
use crate::terrain::TerrainModel;
use crate::trajopt::{box_qp, ReferenceTrajectory, TrackingWeights, WeightPreset};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    /// Previous solution shifted by one step.
    #[default]
    Shift,
    /// Reference controls over the window.
    Reference,
}

/// Tracking weights for the MPC. The offline weights are too soft for a
/// 0.15 s horizon, so the defaults here are stiffer.
pub fn default_mpc_weights() -> WeightPreset {
    WeightPreset {
        body_position: 1e3,
        body_orientation: 1e3,
        limb_position: 1e3,
        limb_orientation: 1e2,
        velocity: 1.0,
        control: 1e-4,
        terminal_factor: 10.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Horizon in reference steps.
    pub horizon: usize,
    /// Re-solve rate, Hz. Zero re-solves at every reference step; lower
    /// rates must divide it.
    pub update_rate: f64,
    pub weights: WeightPreset,
    /// Fixed relaxation of the contact subproblems.
    pub rho: f64,
    /// Gauss-Newton iterations per solve.
    pub max_iterations: usize,
    /// Stop when the predicted decrease is below this fraction of max(cost, 1).
    pub tolerance: f64,
    pub warm_start: WarmStart,
    /// Real-time budget per solve, s. Overruns are logged.
    pub time_budget: f64,
    /// Apply each command one step after the state it was computed from,
    /// planning from the model's prediction of the next state.
    pub latency: bool,
    /// Wrap the reference instead of holding its last state; each wrap is
    /// shifted by the reference's horizontal body displacement.
    pub cyclic: bool,
    /// Relinearize the first horizon step about the measured state.
    pub relinearize: bool,
    /// Contacts with a reference gap above this are left out of the LCP, m.
    pub contact_margin: f64,
    /// Body height deviation that stops the loop, m.
    pub divergence_height: f64,
    /// Simulated time, s. Zero runs the reference duration.
    pub duration: f64,
    pub sim_schedule: RelaxationSchedule,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 3,
            update_rate: 0.0,
            weights: default_mpc_weights(),
            rho: 1e-3,
            max_iterations: 10,
            tolerance: 1e-6,
            warm_start: WarmStart::Shift,
            time_budget: 0.01,
            latency: true,
            cyclic: false,
            relinearize: false,
            contact_margin: 0.05,
            divergence_height: 0.3,
            duration: 0.0,
            sim_schedule: RelaxationSchedule::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("horizon", "must be >= 1"));
        }
        for (field, v) in [("rho", self.rho), ("tolerance", self.tolerance), ("time_budget", self.time_budget)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(field, "must be > 0"));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be >= 1"));
        }
        if !(self.update_rate >= 0.0 && self.update_rate.is_finite()) {
            return Err(Error::invalid("update_rate", "must be >= 0"));
        }
        if !(self.contact_margin >= 0.0) {
            return Err(Error::invalid("contact_margin", "must be >= 0"));
        }
        if !(self.divergence_height > 0.0) {
            return Err(Error::invalid("divergence_height", "must be > 0"));
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return Err(Error::invalid("duration", "must be >= 0"));
        }
        self.sim_schedule.validate()
    }

    pub fn horizon_seconds(&self, h: f64) -> f64 {
        self.horizon as f64 * h
    }

    /// Reference steps between re-solves.
    pub fn solve_every(&self, h: f64) -> Result<usize> {
        if self.update_rate == 0.0 {
            return Ok(1);
        }
        let m = 1.0 / (self.update_rate * h);
        let r = m.round();
        if r < 1.0 || (m - r).abs() > 1e-6 * r {
            return Err(Error::invalid(
                "update_rate",
                format!("must be 1/(m h) for an integer m >= 1 (h = {h} s)"),
            ));
        }
        Ok(r as usize)
    }
}

/// Linearizes every reference step at relaxation `rho`.
pub fn linearize_reference(
    model: &ModelSpec,
    terrain: &TerrainModel,
    reference: &ReferenceTrajectory,
    rho: f64,
    contact_margin: f64,
) -> Result<Vec<LinearizedStepModel>> {
    (0..reference.steps())
        .map(|t| {
            linearize_step(
                model,
                terrain,
                reference.h[t],
                &reference.states[t],
                &reference.controls[t],
                rho,
                contact_margin,
            )
            .map_err(|e| match e {
                Error::NonFiniteJacobian { .. } => Error::NonFiniteJacobian { step: t },
                other => other,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MpcStatus {
    Converged,
    /// Iteration cap hit or no further decrease; best iterate returned.
    Degraded,
    /// Subproblem failed; the reference control is applied.
    Fallback,
    /// No solve this step; the previous plan is continued.
    Held,
}

impl MpcStatus {
    pub fn name(self) -> &'static str {
        match self {
            MpcStatus::Converged => "converged",
            MpcStatus::Degraded => "degraded",
            MpcStatus::Fallback => "fallback",
            MpcStatus::Held => "held",
        }
    }
}

/// One horizon solution.
#[derive(Clone, Debug)]
pub struct MpcPlan {
    pub controls: Vec<DVector<f64>>,
    /// Predicted states `x_1 .. x_H`.
    pub predicted: Vec<DVector<f64>>,
    pub cost: f64,
    pub iterations: usize,
    pub status: MpcStatus,
}

#[derive(Clone, Debug)]
struct Entry {
    lin: LinearizedStepModel,
    bias: DVector<f64>,
    target: DVector<f64>,
    control: DVector<f64>,
}

/// Controller state: the linearized reference and the warm start.
#[derive(Clone, Debug)]
pub struct MpcController {
    model: ModelSpec,
    terrain: TerrainModel,
    config: MpcConfig,
    weights: TrackingWeights,
    /// One entry per reference step plus a hold entry at the final state.
    entries: Vec<Entry>,
    /// Horizontal body displacement over one pass of the reference.
    cycle_shift: [f64; 2],
    last: Option<(usize, Vec<DVector<f64>>)>,
}

fn shift_positions(model: &ModelSpec, x: &DVector<f64>, d: [f64; 2], sign: f64) -> DVector<f64> {
    let mut out = x.clone();
    let mut at = vec![0];
    at.extend(model.limb_layouts().iter().map(|l| l.q));
    for a in at {
        out[a] += sign * d[0];
        out[a + 1] += sign * d[1];
    }
    out
}

impl MpcController {
    pub fn new(model: &ModelSpec, terrain: &TerrainModel, reference: &ReferenceTrajectory, config: &MpcConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let n = reference.steps();
        if n == 0 || reference.states.len() != n + 1 || reference.controls.len() != n {
            return Err(Error::invalid("reference", "needs T states and T-1 controls, T >= 2"));
        }
        if config.horizon > n {
            return Err(Error::invalid("horizon", format!("must not exceed the {n} reference steps")));
        }
        let weights = TrackingWeights::from_preset(model, &config.weights);
        let lins = linearize_reference(model, terrain, reference, config.rho, config.contact_margin)?;
        let mut entries = Vec::with_capacity(n + 1);
        for (t, lin) in lins.into_iter().enumerate() {
            let target = reference.states[t + 1].to_vector();
            let control = reference.controls[t].clone();
            entries.push(Self::entry(model, lin, target, control, config.rho)?);
        }
        let mut hold = reference.states[n].clone();
        hold.v.fill(0.0);
        let control = reference.controls[n - 1].clone();
        let lin = linearize_step(model, terrain, reference.h[n - 1], &hold, &control, config.rho, config.contact_margin)
            .map_err(|e| match e {
                Error::NonFiniteJacobian { .. } => Error::NonFiniteJacobian { step: n },
                other => other,
            })?;
        entries.push(Self::entry(model, lin, hold.to_vector(), control, config.rho)?);
        let d = reference.states[n].body_position() - reference.states[0].body_position();
        Ok(MpcController {
            model: model.clone(),
            terrain: terrain.clone(),
            config: config.clone(),
            weights,
            entries,
            cycle_shift: [d.x, d.y],
            last: None,
        })
    }

    fn entry(model: &ModelSpec, lin: LinearizedStepModel, target: DVector<f64>, control: DVector<f64>, rho: f64) -> Result<Entry> {
        let own = lin.step(model, &lin.state.to_vector(), &lin.control, rho, None, false)?;
        Ok(Entry { bias: &target - own.next, lin, target, control })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    pub fn reference_steps(&self) -> usize {
        self.entries.len() - 1
    }

    /// Entry index and horizontal shift of reference step `t`.
    fn locate(&self, t: usize) -> (usize, [f64; 2]) {
        let n = self.reference_steps();
        if self.config.cyclic {
            let c = (t / n) as f64;
            (t % n, [c * self.cycle_shift[0], c * self.cycle_shift[1]])
        } else {
            (t.min(n), [0.0, 0.0])
        }
    }

    /// Reference state at step `t` (the state the step starts from).
    pub fn reference_state(&self, t: usize) -> DVector<f64> {
        let n = self.reference_steps();
        if t == 0 {
            return self.entries[0].lin.state.to_vector();
        }
        if !self.config.cyclic && t > n {
            return self.entries[n].target.clone();
        }
        let (e, d) = self.locate(t - 1);
        shift_positions(&self.model, &self.entries[e].target, d, 1.0)
    }

    /// Reference control at step `t`, clamped to the bounds.
    pub fn reference_control(&self, t: usize) -> DVector<f64> {
        let (e, _) = self.locate(t);
        self.model.clamp_control(&self.entries[e].control)
    }

    /// Model prediction of the step from `x` under `u` at reference step `t`.
    pub fn predict(&self, x: &DVector<f64>, u: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        Ok(self.model_step(x, u, t, None, false, None)?.0)
    }

    fn model_step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        t: usize,
        warm: Option<&[DVector<f64>]>,
        jac: bool,
        relin: Option<&Entry>,
    ) -> Result<(DVector<f64>, LcpStep)> {
        let (e, d) = self.locate(t);
        let entry = relin.unwrap_or(&self.entries[e]);
        let local = shift_positions(&self.model, x, d, -1.0);
        let s = entry.lin.step(&self.model, &local, u, self.config.rho, warm, jac)?;
        let next = shift_positions(&self.model, &(&s.next + &entry.bias), d, 1.0);
        Ok((next, s))
    }

    fn rollout(
        &self,
        x0: &DVector<f64>,
        t: usize,
        us: &[DVector<f64>],
        relin: Option<&Entry>,
    ) -> Result<(Vec<DVector<f64>>, Vec<LcpStep>)> {
        let mut xs = vec![x0.clone()];
        let mut steps = Vec::with_capacity(us.len());
        for (k, u) in us.iter().enumerate() {
            let r = if k == 0 { relin } else { None };
            let (next, s) = self.model_step(&xs[k], u, t + k, None, true, r)?;
            xs.push(next);
            steps.push(s);
        }
        Ok((xs, steps))
    }

    fn cost(&self, t: usize, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
        let h = us.len();
        let mut c = 0.0;
        for k in 0..h {
            let q = if k + 1 == h { &self.weights.q_n } else { &self.weights.q };
            let e = &xs[k + 1] - self.reference_state(t + k + 1);
            c += e.iter().zip(q).map(|(e, w)| w * e * e).sum::<f64>();
            let du = &us[k] - self.reference_control(t + k);
            c += du.iter().zip(&self.weights.r).map(|(d, w)| w * d * d).sum::<f64>();
        }
        c
    }

    fn initial_controls(&self, t: usize, mode: WarmStart) -> Vec<DVector<f64>> {
        let h = self.config.horizon;
        let mut us: Vec<DVector<f64>> = (0..h).map(|k| self.reference_control(t + k)).collect();
        if mode == WarmStart::Shift {
            if let Some((t0, prev)) = &self.last {
                for (k, slot) in us.iter_mut().enumerate() {
                    if let Some(u) = (t + k).checked_sub(*t0).and_then(|j| prev.get(j)) {
                        *slot = u.clone();
                    }
                }
            }
        }
        us
    }

    /// Solves the horizon problem from `x` at reference step `t` without
    /// touching the warm start.
    pub fn solve(&self, x: &State, t: usize, mode: WarmStart) -> Result<MpcPlan> {
        self.model.check_state(x)?;
        let x0 = x.to_vector();
        let relin = if self.config.relinearize {
            let (e, d) = self.locate(t);
            let local = State::from_vector(&self.model, &shift_positions(&self.model, &x0, d, -1.0))?;
            let base = &self.entries[e];
            let lin = linearize_step(
                &self.model,
                &self.terrain,
                base.lin.h,
                &local,
                &base.control,
                self.config.rho,
                self.config.contact_margin,
            );
            lin.ok().map(|lin| Entry { bias: DVector::zeros(self.model.n_x()), lin, target: base.target.clone(), control: base.control.clone() })
        } else {
            None
        };
        Ok(self.gauss_newton(&x0, t, self.initial_controls(t, mode), relin.as_ref()))
    }

    fn fallback(&self, x0: &DVector<f64>, t: usize) -> MpcPlan {
        let controls: Vec<DVector<f64>> = (0..self.config.horizon).map(|k| self.reference_control(t + k)).collect();
        MpcPlan {
            predicted: vec![x0.clone(); controls.len()],
            controls,
            cost: f64::NAN,
            iterations: 0,
            status: MpcStatus::Fallback,
        }
    }

    fn gauss_newton(&self, x0: &DVector<f64>, t: usize, init: Vec<DVector<f64>>, relin: Option<&Entry>) -> MpcPlan {
        let (n_x, n_u, hz) = (self.model.n_x(), self.model.n_u, self.config.horizon);
        let (lo, hi) = self.model.u_bounds();
        let mut us: Vec<DVector<f64>> = init.iter().map(|u| self.model.clamp_control(u)).collect();
        let (mut xs, mut steps) = match self.rollout(x0, t, &us, relin) {
            Ok(r) => r,
            Err(_) => {
                us = (0..hz).map(|k| self.reference_control(t + k)).collect();
                match self.rollout(x0, t, &us, relin) {
                    Ok(r) => r,
                    Err(_) => return self.fallback(x0, t),
                }
            }
        };
        let mut cost = self.cost(t, &xs, &us);
        let mut iterations = 0;
        let mut converged = false;
        let nz = hz * n_u;
        while iterations < self.config.max_iterations {
            iterations += 1;
            // Condensed sensitivities S_k = d x_k / d U.
            let mut hess = DMatrix::zeros(nz, nz);
            let mut grad = DVector::zeros(nz);
            let mut sens = DMatrix::zeros(n_x, nz);
            for k in 0..hz {
                let s = &steps[k];
                sens = &s.dx * &sens;
                let mut blk = sens.columns_mut(k * n_u, n_u);
                blk += &s.du;
                let q = if k + 1 == hz { &self.weights.q_n } else { &self.weights.q };
                let e = &xs[k + 1] - self.reference_state(t + k + 1);
                let qs = DMatrix::from_fn(n_x, nz, |i, j| q[i] * sens[(i, j)]);
                hess += sens.transpose() * &qs;
                grad += qs.transpose() * &e;
                let du = &us[k] - self.reference_control(t + k);
                for i in 0..n_u {
                    let w = self.weights.r[i];
                    hess[(k * n_u + i, k * n_u + i)] += w;
                    grad[k * n_u + i] += w * du[i];
                }
            }
            hess *= 2.0;
            grad *= 2.0;
            let mut dlo = DVector::zeros(nz);
            let mut dhi = DVector::zeros(nz);
            for k in 0..hz {
                for i in 0..n_u {
                    dlo[k * n_u + i] = lo[i] - us[k][i];
                    dhi[k * n_u + i] = hi[i] - us[k][i];
                }
            }
            let Some(qp) = box_qp(&hess, &grad, &dlo, &dhi, &DVector::zeros(nz)) else {
                break;
            };
            let dz = qp.x;
            let predicted = -(0.5 * dz.dot(&(&hess * &dz)) + grad.dot(&dz));
            if predicted <= self.config.tolerance * cost.max(1.0) {
                converged = true;
                break;
            }
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..12 {
                let trial: Vec<DVector<f64>> = (0..hz)
                    .map(|k| self.model.clamp_control(&(&us[k] + dz.rows(k * n_u, n_u) * alpha)))
                    .collect();
                if let Ok((txs, tsteps)) = self.rollout(x0, t, &trial, relin) {
                    let c = self.cost(t, &txs, &trial);
                    if c <= cost - 1e-4 * alpha * predicted {
                        us = trial;
                        xs = txs;
                        steps = tsteps;
                        cost = c;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        MpcPlan {
            controls: us,
            predicted: xs.split_off(1),
            cost,
            iterations,
            status: if converged { MpcStatus::Converged } else { MpcStatus::Degraded },
        }
    }

    /// Solves at reference step `t` with the configured warm start and keeps
    /// the solution for the next call.
    pub fn step(&mut self, x: &State, t: usize) -> Result<MpcPlan> {
        let plan = self.solve(x, t, self.config.warm_start)?;
        if plan.status != MpcStatus::Fallback {
            self.last = Some((t, plan.controls.clone()));
        } else {
            self.last = None;
        }
        Ok(plan)
    }

    /// Control to apply at step `t` between re-solves: the stored plan while
    /// it lasts, then the reference.
    pub fn held_control(&self, t: usize) -> DVector<f64> {
        if let Some((t0, prev)) = &self.last {
            if let Some(u) = t.checked_sub(*t0).and_then(|j| prev.get(j)) {
                return u.clone();
            }
        }
        self.reference_control(t)
    }
}

/// First control of the horizon solution at reference step `t`.
pub fn mpc_step(controller: &mut MpcController, x_measured: &State, t: usize) -> Result<DVector<f64>> {
    Ok(controller.step(x_measured, t)?.controls.swap_remove(0))
}

/// Impulse applied to the body at `time`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    /// s
    pub time: f64,
    /// N s, world frame
    pub impulse: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingStep {
    pub time: f64,
    pub index: usize,
    pub measured: State,
    #[serde(with = "crate::util::serde_dvec")]
    pub control: DVector<f64>,
    pub predicted: Option<State>,
    /// s
    pub solve_time: f64,
    pub status: MpcStatus,
    pub iterations: usize,
    pub overrun: bool,
    /// Simulator normal force of every contact over the step, N.
    pub normal_forces: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    Diverged { time: f64, reason: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackingSummary {
    pub steps: usize,
    /// Infinity norm of `x - x*` over every logged state.
    pub max_state_error: f64,
    /// m
    pub max_body_position_error: f64,
    /// m
    pub max_body_height_error: f64,
    /// m
    pub rms_body_position_error: f64,
    pub max_limb_position_error: f64,
    /// s
    pub median_solve_time: f64,
    /// s
    pub max_solve_time: f64,
    pub converged: usize,
    pub degraded: usize,
    pub fallbacks: usize,
    pub overruns: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingLog {
    pub contact_names: Vec<String>,
    pub steps: Vec<TrackingStep>,
    pub final_time: f64,
    pub final_state: State,
    /// Reference state at every logged step, then at the final state.
    pub reference: Vec<State>,
    pub termination: Termination,
    pub summary: TrackingSummary,
}

impl TrackingLog {
    pub fn diverged(&self) -> bool {
        matches!(self.termination, Termination::Diverged { .. })
    }

    /// Measured states including the final one.
    pub fn states(&self) -> Vec<State> {
        let mut out: Vec<State> = self.steps.iter().map(|s| s.measured.clone()).collect();
        out.push(self.final_state.clone());
        out
    }

    pub fn times(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.steps.iter().map(|s| s.time).collect();
        out.push(self.final_time);
        out
    }

    /// One row per control step and a last row for the final state:
    /// `t, index, status, iterations, solve_time_s, overrun, q*, v*, u*,
    /// <contact>_fn*, pred_q*, pred_v*`. Control, force and prediction
    /// cells are blank on the final row and on rows without a prediction.
    pub fn write_csv(&self, model: &ModelSpec, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> =
            ["t", "index", "status", "iterations", "solve_time_s", "overrun"].iter().map(|s| s.to_string()).collect();
        header.extend((0..model.n_q).map(|i| format!("q{i}")));
        header.extend((0..model.n_v).map(|i| format!("v{i}")));
        header.extend((0..model.n_u).map(|i| format!("u{i}")));
        header.extend(self.contact_names.iter().map(|n| format!("{n}_fn")));
        header.extend((0..model.n_q).map(|i| format!("pred_q{i}")));
        header.extend((0..model.n_v).map(|i| format!("pred_v{i}")));
        w.write_record(&header)?;
        let blank = |n: usize| std::iter::repeat_n(String::new(), n);
        for s in &self.steps {
            let mut row = vec![
                fmt(s.time),
                s.index.to_string(),
                s.status.name().to_string(),
                s.iterations.to_string(),
                fmt(s.solve_time),
                s.overrun.to_string(),
            ];
            row.extend(s.measured.q.iter().chain(s.measured.v.iter()).map(|x| fmt(*x)));
            row.extend(s.control.iter().map(|x| fmt(*x)));
            row.extend(s.normal_forces.iter().map(|x| fmt(*x)));
            match &s.predicted {
                Some(p) => row.extend(p.q.iter().chain(p.v.iter()).map(|x| fmt(*x))),
                None => row.extend(blank(model.n_x())),
            }
            w.write_record(&row)?;
        }
        let mut row = vec![fmt(self.final_time), self.steps.len().to_string(), String::new(), String::new(), String::new(), String::new()];
        row.extend(self.final_state.q.iter().chain(self.final_state.v.iter()).map(|x| fmt(*x)));
        row.extend(blank(model.n_u + self.contact_names.len() + model.n_x()));
        w.write_record(&row)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Lifts every limb out of `terrain` so no contact point starts below it.
pub fn settle_on_terrain(model: &ModelSpec, terrain: &TerrainModel, state: &State) -> State {
    let mut out = state.clone();
    let mut lift = vec![0.0_f64; model.limbs.len()];
    for c in model.contact_points(&state.q) {
        lift[c.limb] = lift[c.limb].max(-terrain.signed_distance(&c.position));
    }
    for (lay, d) in model.limb_layouts().iter().zip(lift) {
        out.q[lay.q + 2] += d;
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Closed-loop tracking: the simulator runs on `sim_terrain` with exact
/// contact while the controller plans on `mpc_terrain`.
pub fn track_closed_loop(
    model: &ModelSpec,
    sim_terrain: &TerrainModel,
    mpc_terrain: &TerrainModel,
    reference: &ReferenceTrajectory,
    config: &MpcConfig,
    disturbances: &[Disturbance],
) -> Result<TrackingLog> {
    let mut ctrl = MpcController::new(model, mpc_terrain, reference, config)?;
    let x0 = settle_on_terrain(model, sim_terrain, &reference.states[0]);
    run_loop(model, sim_terrain, reference, &mut ctrl, &x0, disturbances)
}

/// Runs the loop with an existing controller from `initial`.
pub fn run_loop(
    model: &ModelSpec,
    sim_terrain: &TerrainModel,
    reference: &ReferenceTrajectory,
    ctrl: &mut MpcController,
    initial: &State,
    disturbances: &[Disturbance],
) -> Result<TrackingLog> {
    model.check_state(initial)?;
    let config = ctrl.config().clone();
    for d in disturbances {
        if !(d.time >= 0.0 && d.time.is_finite() && d.impulse.iter().all(|x| x.is_finite())) {
            return Err(Error::invalid("disturbances", "times must be >= 0 and impulses finite"));
        }
    }
    let n_ref = reference.steps();
    let h_last = reference.h[n_ref - 1];
    let h_at = |s: usize| if config.cyclic { reference.h[s % n_ref] } else { reference.h.get(s).copied().unwrap_or(h_last) };
    let n_steps = if config.duration > 0.0 {
        let mut t = 0.0;
        let mut s = 0;
        while t < config.duration - 1e-9 {
            t += h_at(s);
            s += 1;
        }
        s
    } else {
        n_ref
    };
    let every = config.solve_every(reference.h[0])?;
    let mut applied = vec![false; disturbances.len()];
    let mut x = initial.clone();
    let mut time = 0.0;
    let mut steps = Vec::with_capacity(n_steps);
    let mut refs = Vec::with_capacity(n_steps + 1);
    let mut pending = ctrl.reference_control(0);
    let mut termination = Termination::Completed;
    let mut solve_times = vec![];
    for s in 0..n_steps {
        for (d, done) in disturbances.iter().zip(applied.iter_mut()) {
            if !*done && time >= d.time - 1e-9 {
                *done = true;
                for k in 0..3 {
                    x.v[k] += d.impulse[k] / model.body_mass;
                }
            }
        }
        refs.push(State::from_vector(model, &ctrl.reference_state(s))?);
        let (u, plan, solve_time) = if config.latency {
            let u = pending.clone();
            let next = s + 1;
            let (plan, dt) = if next % every == 0 {
                let start = Instant::now();
                let plan = match ctrl.predict(&x.to_vector(), &u, s) {
                    Ok(xp) => ctrl.step(&State::from_vector(model, &xp)?, next)?,
                    Err(_) => ctrl.fallback(&x.to_vector(), next),
                };
                (Some(plan), start.elapsed().as_secs_f64())
            } else {
                (None, 0.0)
            };
            pending = match &plan {
                Some(p) => p.controls[0].clone(),
                None => ctrl.held_control(next),
            };
            (u, plan, dt)
        } else if s % every == 0 {
            let start = Instant::now();
            let plan = ctrl.step(&x, s)?;
            let dt = start.elapsed().as_secs_f64();
            (plan.controls[0].clone(), Some(plan), dt)
        } else {
            (ctrl.held_control(s), None, 0.0)
        };
        let (status, iterations, predicted) = match &plan {
            Some(p) => {
                solve_times.push(solve_time);
                let pred = if config.latency { None } else { p.predicted.first().map(|v| State::from_vector(model, v)).transpose()? };
                (p.status, p.iterations, pred)
            }
            None => (MpcStatus::Held, 0, None),
        };
        let h = h_at(s);
        let result = step_ncp(model, sim_terrain, h, &x, &u, &config.sim_schedule);
        let (next, normals) = match result {
            Ok(r) => (Some(r.next_state), r.forces.iter().map(|f| f.normal).collect()),
            Err(e) => {
                termination = Termination::Diverged { time, reason: format!("simulator step failed: {e}") };
                (None, vec![f64::NAN; model.n_contacts()])
            }
        };
        steps.push(TrackingStep {
            time,
            index: s,
            measured: x.clone(),
            control: u,
            predicted,
            solve_time,
            status,
            iterations,
            overrun: plan.is_some() && solve_time > config.time_budget,
            normal_forces: normals,
        });
        let Some(next) = next else { break };
        x = next;
        time += h;
        let target = ctrl.reference_state(s + 1);
        if !x.is_finite() {
            termination = Termination::Diverged { time, reason: "non-finite state".into() };
            break;
        }
        let dz = (x.q[2] - target[2]).abs();
        if dz > config.divergence_height {
            termination = Termination::Diverged { time, reason: format!("body height off by {dz:.3} m") };
            break;
        }
    }
    refs.push(State::from_vector(model, &ctrl.reference_state(steps.len()))?);
    let mut summary = TrackingSummary { steps: steps.len(), ..Default::default() };
    let measured: Vec<&State> = steps.iter().map(|s| &s.measured).chain(std::iter::once(&x)).collect();
    let mut sq = 0.0;
    for (m, r) in measured.iter().zip(&refs) {
        let e = m.to_vector() - r.to_vector();
        summary.max_state_error = summary.max_state_error.max(e.amax());
        let eb = (m.body_position() - r.body_position()).norm();
        summary.max_body_position_error = summary.max_body_position_error.max(eb);
        summary.max_body_height_error = summary.max_body_height_error.max((m.q[2] - r.q[2]).abs());
        sq += eb * eb;
        for lay in model.limb_layouts() {
            let el = (crate::util::seg3(&m.q, lay.q) - crate::util::seg3(&r.q, lay.q)).norm();
            summary.max_limb_position_error = summary.max_limb_position_error.max(el);
        }
    }
    summary.rms_body_position_error = (sq / measured.len() as f64).sqrt();
    for s in &steps {
        match s.status {
            MpcStatus::Converged => summary.converged += 1,
            MpcStatus::Degraded => summary.degraded += 1,
            MpcStatus::Fallback => summary.fallbacks += 1,
            MpcStatus::Held => {}
        }
        summary.overruns += s.overrun as usize;
    }
    summary.max_solve_time = solve_times.iter().copied().fold(0.0, f64::max);
    summary.median_solve_time = median(solve_times);
    Ok(TrackingLog {
        contact_names: model.contact_names(),
        steps,
        final_time: time,
        final_state: x,
        reference: refs,
        termination,
        summary,
    })
}
