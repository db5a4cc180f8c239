use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use legmimic::retarget::RetargetedReference;
use legmimic::testkit::{generate_synthetic_keypoints, Pattern, SyntheticParams};
use legmimic::trajopt::ReferenceTrajectory;
use legmimic_cli::pipeline::{self, At, Stage, StageError, EXIT_INPUT, EXIT_INTERNAL, EXIT_OK};
use legmimic_cli::plot::{emit_plot_data, plot_channels, read_tracked_states, PlotSources};
use legmimic_cli::scenario::{load_scenario, locate, validate_scenario, LoadedScenario, ROOT_ENV};

#[derive(Parser)]
#[command(name = "legmimic", version, about = "Motion imitation for point-foot legged robots")]
struct Cli {
    /// Seed for randomized utilities.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Key points to a reference state sequence (ref.json).
    Retarget {
        scenario: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contact-implicit trajectory optimization (traj.json).
    Optimize {
        scenario: String,
        /// Retargeted reference; computed from the key points when absent.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop MPC tracking in simulation (track.csv).
    Track {
        scenario: String,
        /// Optimized trajectory; defaults to traj.json in the output directory.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage, writing ref.json, traj.json, track.csv and report.json.
    Run {
        #[arg(required = true)]
        scenarios: Vec<String>,
        /// Output directory; one subdirectory per scenario when several are given.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Scenarios run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Foot-height CSV of the key-point, optimized and tracked stages.
    PlotData {
        scenario: String,
        /// Directory holding ref.json, traj.json and track.csv.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Comma-separated channels; all when absent, none when empty.
        #[arg(long)]
        channels: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Checks scenarios without running them.
    Validate {
        #[arg(required = true)]
        scenarios: Vec<String>,
    },
    /// Writes a synthetic key-point file.
    Generate {
        /// stand, pace, reach, cpr, stretch or wave.
        pattern: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        dt: f64,
        #[arg(long, default_value_t = 0.0)]
        duration: f64,
        #[arg(long, default_value_t = 0.0)]
        penetration: f64,
        #[arg(long, default_value_t = 0.0)]
        foot_slip: f64,
        #[arg(long, default_value_t = 0.0)]
        float_height: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0.1)]
        step_height: f64,
    },
}

fn load(arg: &str) -> Result<LoadedScenario, StageError> {
    load_scenario(locate(arg)).at(Stage::Load)
}

fn default_file(ls: &LoadedScenario, name: &str) -> PathBuf {
    pipeline::output_dir(ls, None).join(name)
}

fn create_parent(path: &Path) -> Result<(), StageError> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => {
            std::fs::create_dir_all(d).map_err(|e| legmimic::Error::Io { path: d.into(), source: e }).at(Stage::Output)
        }
        _ => Ok(()),
    }
}

type RunResult = Result<(String, i32), StageError>;

fn run_one(arg: &str, out_dir: Option<&Path>, many: bool) -> RunResult {
    let ls = load(arg)?;
    let flag = out_dir.map(|d| if many { d.join(&ls.scenario.name) } else { d.to_path_buf() });
    let dir = pipeline::output_dir(&ls, flag.as_deref());
    let outcome = pipeline::run_pipeline(&ls, &dir)?;
    let r = &outcome.report;
    let line = format!(
        "{}: {} (min gap {:.2e} m, max body height error {:.2e} m) -> {}",
        r.scenario,
        r.status,
        r.trajectory.min_gap,
        r.tracking.max_body_height_error,
        dir.display()
    );
    Ok((line, r.exit_code()))
}

fn execute(cli: Cli) -> Result<i32, StageError> {
    match cli.command {
        Command::Retarget { scenario, out } => {
            let ls = load(&scenario)?;
            let inputs = pipeline::load_inputs(&ls)?;
            let r = pipeline::run_retarget(&ls, &inputs)?;
            let out = out.unwrap_or_else(|| default_file(&ls, "ref.json"));
            create_parent(&out)?;
            r.save(&out).at(Stage::Output)?;
            println!("{} knot points -> {}", r.states.len(), out.display());
            Ok(EXIT_OK)
        }
        Command::Optimize { scenario, reference, out } => {
            let ls = load(&scenario)?;
            let inputs = pipeline::load_inputs(&ls)?;
            let r = match reference {
                Some(p) => RetargetedReference::load(p).at(Stage::Optimize)?,
                None => pipeline::run_retarget(&ls, &inputs)?,
            };
            let traj = pipeline::run_optimize(&ls, &inputs, &r)?;
            let out = out.unwrap_or_else(|| default_file(&ls, "traj.json"));
            create_parent(&out)?;
            traj.save(&out).at(Stage::Output)?;
            println!("{:?} after {} iterations, min gap {:.2e} m -> {}", traj.status, traj.iterations, traj.min_gap, out.display());
            Ok(if traj.is_flagged() { pipeline::EXIT_FLAGGED } else { EXIT_OK })
        }
        Command::Track { scenario, trajectory, out } => {
            let ls = load(&scenario)?;
            let inputs = pipeline::load_inputs(&ls)?;
            let path = trajectory.unwrap_or_else(|| default_file(&ls, "traj.json"));
            let traj = ReferenceTrajectory::load(&path).map_err(|e| StageError { stage: Stage::Track, source: e })?;
            let log = pipeline::run_track(&ls, &inputs, &traj)?;
            let out = out.unwrap_or_else(|| default_file(&ls, "track.csv"));
            create_parent(&out)?;
            log.write_csv(&inputs.model, &out).at(Stage::Output)?;
            println!(
                "{} steps, {:?}, median solve {:.3} ms -> {}",
                log.summary.steps,
                log.termination,
                log.summary.median_solve_time * 1e3,
                out.display()
            );
            Ok(if log.diverged() { pipeline::EXIT_FLAGGED } else { EXIT_OK })
        }
        Command::Run { scenarios, out_dir, jobs } => {
            let many = scenarios.len() > 1;
            let results: Mutex<Vec<Option<RunResult>>> = Mutex::new((0..scenarios.len()).map(|_| None).collect());
            let next = AtomicUsize::new(0);
            std::thread::scope(|s| {
                for _ in 0..jobs.clamp(1, scenarios.len()) {
                    s.spawn(|| loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(arg) = scenarios.get(i) else { break };
                        let r = run_one(arg, out_dir.as_deref(), many);
                        results.lock().expect("no poisoned lock")[i] = Some(r);
                    });
                }
            });
            let mut code = EXIT_OK;
            for (arg, r) in scenarios.iter().zip(results.into_inner().expect("no poisoned lock")) {
                match r.expect("every scenario ran") {
                    Ok((line, c)) => {
                        println!("{line}");
                        code = worst(code, c);
                    }
                    Err(e) => {
                        eprintln!("error: {arg}: {e}");
                        code = worst(code, e.exit_code());
                    }
                }
            }
            Ok(code)
        }
        Command::PlotData { scenario, run_dir, channels, out } => {
            let ls = load(&scenario)?;
            let inputs = pipeline::load_inputs(&ls)?;
            let dir = run_dir.unwrap_or_else(|| pipeline::output_dir(&ls, None));
            let r = RetargetedReference::load(dir.join("ref.json")).at(Stage::PlotData)?;
            let traj = ReferenceTrajectory::load(dir.join("traj.json")).at(Stage::PlotData)?;
            let tracked = read_tracked_states(&inputs.model, dir.join("track.csv")).at(Stage::PlotData)?;
            let channels: Vec<String> = match channels {
                None => plot_channels(&inputs.model),
                Some(c) => c.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect(),
            };
            let src = PlotSources {
                model: &inputs.model,
                times: &r.times,
                keypoints: &r.states,
                optimized: &traj.states,
                tracked: &tracked,
                plan_terrain: &inputs.mpc_terrain,
                sim_terrain: &inputs.sim_terrain,
            };
            create_parent(&out)?;
            emit_plot_data(&src, &channels, &out).map_err(|source| {
                let stage = if matches!(source, legmimic::Error::UnknownChannel { .. }) { Stage::PlotData } else { Stage::Output };
                StageError { stage, source }
            })?;
            println!("{} channels -> {}", channels.len(), out.display());
            Ok(EXIT_OK)
        }
        Command::Validate { scenarios } => {
            let mut code = EXIT_OK;
            for arg in scenarios {
                let report = validate_scenario(locate(&arg));
                let text = serde_json::to_string_pretty(&report).expect("report serializes");
                println!("{text}");
                for w in &report.warnings {
                    log::warn!("{}: {w}", report.scenario);
                }
                if !report.ok() {
                    code = worst(code, EXIT_INPUT);
                }
            }
            Ok(code)
        }
        Command::Generate { pattern, out, dt, duration, penetration, foot_slip, float_height, noise, step_height } => {
            let pattern = Pattern::parse(&pattern).at(Stage::Load)?;
            let params = SyntheticParams { dt, duration, penetration, foot_slip, float_height, noise, step_height };
            let track = generate_synthetic_keypoints(pattern, &params, cli.seed).at(Stage::Load)?;
            create_parent(&out)?;
            track.save(&out).at(Stage::Output)?;
            println!("{} frames -> {}", track.len(), out.display());
            Ok(EXIT_OK)
        }
    }
}

/// Internal errors outrank input errors, which outrank solver flags.
fn worst(a: i32, b: i32) -> i32 {
    let rank = |c: i32| match c {
        EXIT_INTERNAL => 3,
        EXIT_INPUT => 2,
        EXIT_OK => 0,
        _ => 1,
    };
    if rank(b) > rank(a) {
        b
    } else {
        a
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    log::debug!("scenario root from {ROOT_ENV}: {:?}", std::env::var_os(ROOT_ENV));
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
