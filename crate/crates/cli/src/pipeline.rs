//! Retarget, optimize, track, report.

use std::fmt;
use std::path::{Path, PathBuf};

use legmimic::model::{ModelSpec, State};
use legmimic::mpc::{track_closed_loop, MpcStatus, Termination, TrackingLog};
use legmimic::retarget::{load_keypoints, retarget, RetargetedReference};
use legmimic::sim::{feasibility_report, FeasibilityTolerances, RolloutLog};
use legmimic::terrain::TerrainModel;
use legmimic::trajopt::{check_dynamics_feasibility, solve_reference, ReferenceTrajectory, SolveStatus, TrajOptProblem};
use legmimic::Error;
use serde::{Deserialize, Serialize};

use crate::scenario::{LoadedScenario, Scenario};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FLAGGED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Retarget,
    Optimize,
    Track,
    Report,
    PlotData,
    /// Writing artifacts.
    Output,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Retarget => "retarget",
            Stage::Optimize => "optimize",
            Stage::Track => "track",
            Stage::Report => "report",
            Stage::PlotData => "plot-data",
            Stage::Output => "output",
        }
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {}", self.stage.name(), self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        match &self.source {
            Error::InvalidParameter { .. }
            | Error::DimensionMismatch { .. }
            | Error::Schema { .. }
            | Error::NonMonotoneTimes { .. }
            | Error::MissingMapping(_)
            | Error::UnknownChannel { .. } => EXIT_INPUT,
            Error::Io { .. } if matches!(self.stage, Stage::Load | Stage::Retarget | Stage::PlotData) => EXIT_INPUT,
            Error::SolverFailure { .. }
            | Error::NoConsistentMode { .. }
            | Error::NonFiniteJacobian { .. }
            | Error::Divergence { .. } => EXIT_FLAGGED,
            _ => EXIT_INTERNAL,
        }
    }
}

pub trait At<T> {
    fn at(self, stage: Stage) -> Result<T, StageError>;
}

impl<T> At<T> for legmimic::Result<T> {
    fn at(self, stage: Stage) -> Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Model and terrains of a scenario.
pub struct Inputs {
    pub model: ModelSpec,
    pub sim_terrain: TerrainModel,
    pub mpc_terrain: TerrainModel,
}

pub fn load_inputs(ls: &LoadedScenario) -> Result<Inputs, StageError> {
    let model = ls.load_model().at(Stage::Load)?;
    let (sim_terrain, mpc_terrain) = ls.load_terrains().at(Stage::Load)?;
    Ok(Inputs { model, sim_terrain, mpc_terrain })
}

pub fn run_retarget(ls: &LoadedScenario, inputs: &Inputs) -> Result<RetargetedReference, StageError> {
    let s = &ls.scenario;
    let track = load_keypoints(ls.keypoints_path()).at(Stage::Retarget)?;
    let r = retarget(&track, &inputs.model, &s.retarget, s.h).at(Stage::Retarget)?;
    if r.states.len() != s.knots {
        let reason = format!("key points give {} knot points at h = {}, scenario expects {}", r.states.len(), s.h, s.knots);
        return Err(StageError { stage: Stage::Retarget, source: Error::InvalidParameter { field: "knots".into(), reason } });
    }
    Ok(r)
}

pub fn run_optimize(ls: &LoadedScenario, inputs: &Inputs, reference: &RetargetedReference) -> Result<ReferenceTrajectory, StageError> {
    let mut p = TrajOptProblem::new(inputs.model.clone(), inputs.mpc_terrain.clone(), reference.states.clone(), ls.scenario.h);
    p.config = ls.scenario.trajopt.clone();
    solve_reference(&p).at(Stage::Optimize)
}

pub fn run_track(ls: &LoadedScenario, inputs: &Inputs, trajectory: &ReferenceTrajectory) -> Result<TrackingLog, StageError> {
    let s = &ls.scenario;
    track_closed_loop(&inputs.model, &inputs.sim_terrain, &inputs.mpc_terrain, trajectory, &s.mpc, &s.disturbances)
        .at(Stage::Track)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Named {
    pub name: String,
    pub value: f64,
}

fn named(names: &[String], values: impl IntoIterator<Item = f64>) -> Vec<Named> {
    names.iter().cloned().zip(values).map(|(name, value)| Named { name, value }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSummary {
    pub knots: usize,
    /// Smallest contact signed distance to the planning terrain, m.
    pub min_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub status: SolveStatus,
    pub iterations: usize,
    pub knots: usize,
    /// Sum of the step lengths, s.
    pub duration: f64,
    pub cost: f64,
    pub kkt_residual: f64,
    pub min_gap: f64,
    pub max_penetration: f64,
    pub max_dynamics_defect: f64,
    pub max_complementarity: f64,
    /// Defect of a replay with the stored forces.
    pub replay_defect: f64,
    /// Per limb RMS distance to the key-point reference, m.
    pub limb_rmse: Vec<Named>,
    /// Per contact fraction of loaded steps.
    pub loaded_fraction: Vec<Named>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub termination: Termination,
    pub steps: usize,
    pub max_state_error: f64,
    pub max_body_position_error: f64,
    pub max_body_height_error: f64,
    pub rms_body_position_error: f64,
    pub max_limb_position_error: f64,
    /// Smallest contact signed distance to the simulator terrain, m.
    pub min_gap: f64,
    pub converged: usize,
    pub degraded: usize,
    pub fallbacks: usize,
    pub held: usize,
}

/// Contents of `report.json`. Wall-clock quantities are left out so that
/// reruns produce identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub status: String,
    pub flags: Vec<String>,
    pub artifacts: Vec<String>,
    pub keypoints: KeypointSummary,
    pub trajectory: TrajectorySummary,
    pub tracking: TrackingReport,
    pub effective_config: Scenario,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        if self.flags.is_empty() {
            EXIT_OK
        } else {
            EXIT_FLAGGED
        }
    }
}

pub fn min_gap(model: &ModelSpec, terrain: &TerrainModel, states: &[State]) -> f64 {
    states
        .iter()
        .flat_map(|s| model.contact_points(&s.q))
        .map(|c| terrain.signed_distance(&c.position))
        .fold(f64::INFINITY, f64::min)
}

/// Per limb RMS distance between limb positions of two state sequences.
pub fn limb_rmse(model: &ModelSpec, a: &[State], b: &[State]) -> Vec<f64> {
    let n = a.len().min(b.len()).max(1) as f64;
    model
        .limb_layouts()
        .iter()
        .map(|lay| {
            let ss: f64 = a
                .iter()
                .zip(b)
                .map(|(x, y)| (0..3).map(|k| (x.q[lay.q + k] - y.q[lay.q + k]).powi(2)).sum::<f64>())
                .sum();
            (ss / n).sqrt()
        })
        .collect()
}

pub const ARTIFACTS: [&str; 4] = ["ref.json", "traj.json", "track.csv", "report.json"];

pub fn build_report(
    ls: &LoadedScenario,
    inputs: &Inputs,
    reference: &RetargetedReference,
    trajectory: &ReferenceTrajectory,
    log: &TrackingLog,
) -> Result<RunReport, StageError> {
    let model = &inputs.model;
    let dynamics = check_dynamics_feasibility(trajectory, model, &inputs.mpc_terrain, ls.scenario.trajopt.dynamics_tolerance)
        .at(Stage::Report)?;
    let times = trajectory.times();
    let kin = RolloutLog::kinematic(times, trajectory.states.clone()).at(Stage::Report)?;
    let feas = feasibility_report(model, &kin, &inputs.mpc_terrain, &FeasibilityTolerances::default()).at(Stage::Report)?;
    let limbs: Vec<String> = model.limbs.iter().map(|l| l.name.clone()).collect();
    let steps = trajectory.contact_schedule.len().max(1) as f64;
    let loaded = (0..trajectory.contact_names.len())
        .map(|c| trajectory.contact_schedule.iter().filter(|row| row[c]).count() as f64 / steps);

    let mut flags = Vec::new();
    if trajectory.is_flagged() {
        flags.push(format!("optimize: {:?}", trajectory.status));
    }
    if !dynamics.passed {
        flags.push("optimize: dynamics replay exceeds tolerance".into());
    }
    if let Termination::Diverged { time, reason } = &log.termination {
        flags.push(format!("track: diverged at t = {time:.3}: {reason}"));
    }
    let sum = &log.summary;
    Ok(RunReport {
        scenario: ls.scenario.name.clone(),
        status: if flags.is_empty() { "ok".into() } else { "solver_flagged".into() },
        flags,
        artifacts: ARTIFACTS.iter().map(|s| s.to_string()).collect(),
        keypoints: KeypointSummary {
            knots: reference.states.len(),
            min_gap: min_gap(model, &inputs.mpc_terrain, &reference.states),
        },
        trajectory: TrajectorySummary {
            status: trajectory.status,
            iterations: trajectory.iterations,
            knots: trajectory.states.len(),
            duration: trajectory.h.iter().sum(),
            cost: trajectory.cost,
            kkt_residual: trajectory.kkt_residual,
            min_gap: trajectory.min_gap,
            max_penetration: feas.worst_penetration(),
            max_dynamics_defect: trajectory.max_dynamics_defect,
            max_complementarity: trajectory.max_complementarity,
            replay_defect: dynamics.max_defect,
            limb_rmse: named(&limbs, limb_rmse(model, &trajectory.states, &reference.states)),
            loaded_fraction: named(&trajectory.contact_names, loaded),
        },
        tracking: TrackingReport {
            termination: log.termination.clone(),
            steps: sum.steps,
            max_state_error: sum.max_state_error,
            max_body_position_error: sum.max_body_position_error,
            max_body_height_error: sum.max_body_height_error,
            rms_body_position_error: sum.rms_body_position_error,
            max_limb_position_error: sum.max_limb_position_error,
            min_gap: min_gap(model, &inputs.sim_terrain, &log.states()),
            converged: sum.converged,
            degraded: sum.degraded,
            fallbacks: sum.fallbacks,
            held: log.steps.iter().filter(|s| s.status == MpcStatus::Held).count(),
        },
        effective_config: ls.scenario.clone(),
    })
}

pub fn write_report(report: &RunReport, path: &Path) -> Result<(), StageError> {
    let text = serde_json::to_string_pretty(report).map_err(Error::from).at(Stage::Report)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Io { path: path.into(), source: e }).at(Stage::Output)
}

pub struct PipelineOutcome {
    pub report: RunReport,
    pub files: Vec<PathBuf>,
    pub log: TrackingLog,
}

/// Runs every stage and writes the artifacts into `out_dir`.
pub fn run_pipeline(ls: &LoadedScenario, out_dir: &Path) -> Result<PipelineOutcome, StageError> {
    let inputs = load_inputs(ls)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io { path: out_dir.into(), source: e }).at(Stage::Output)?;
    let files: Vec<PathBuf> = ARTIFACTS.iter().map(|f| out_dir.join(f)).collect();

    let reference = run_retarget(ls, &inputs)?;
    reference.save(&files[0]).at(Stage::Output)?;
    log::info!("{}: retargeted {} knot points", ls.scenario.name, reference.states.len());

    let trajectory = run_optimize(ls, &inputs, &reference)?;
    trajectory.save(&files[1]).at(Stage::Output)?;
    log::info!("{}: optimized ({:?}, {} iterations)", ls.scenario.name, trajectory.status, trajectory.iterations);

    let log = run_track(ls, &inputs, &trajectory)?;
    log.write_csv(&inputs.model, &files[2]).at(Stage::Output)?;
    log::info!("{}: tracked {} steps, median solve {:.3} ms", ls.scenario.name, log.summary.steps, log.summary.median_solve_time * 1e3);

    let report = build_report(ls, &inputs, &reference, &trajectory, &log)?;
    write_report(&report, &files[3])?;
    Ok(PipelineOutcome { report, files, log })
}

/// Output directory: the scenario's own setting, else the flag, else
/// `output/<name>`.
pub fn output_dir(ls: &LoadedScenario, flag: Option<&Path>) -> PathBuf {
    match (&ls.scenario.output_dir, flag) {
        (Some(p), _) => ls.resolve(p),
        (None, Some(f)) => f.to_path_buf(),
        (None, None) => PathBuf::from("output").join(&ls.scenario.name),
    }
}
