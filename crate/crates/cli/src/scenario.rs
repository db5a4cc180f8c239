//! Scenario files: which model, terrains, key points and solver settings a
//! pipeline run uses.

use std::path::{Path, PathBuf};

use legmimic::model::ModelSpec;
use legmimic::mpc::{Disturbance, MpcConfig};
use legmimic::retarget::{load_keypoints, resample_times, retarget, RetargetConfig};
use legmimic::terrain::TerrainModel;
use legmimic::trajopt::TrajOptConfig;
use legmimic::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable naming the directory scenario names resolve in.
pub const ROOT_ENV: &str = "LEGMIMIC_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainRefs {
    /// Terrain the simulator runs on.
    pub sim: PathBuf,
    /// Terrain assumed by the optimizer and the controller.
    pub mpc: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Paths are relative to the scenario file.
    pub model: PathBuf,
    pub terrain: TerrainRefs,
    pub keypoints: PathBuf,
    /// Nominal step, s.
    pub h: f64,
    /// Knot points `T`; the motion spans `T * h` seconds.
    pub knots: usize,
    #[serde(default)]
    pub retarget: RetargetConfig,
    #[serde(default)]
    pub trajopt: TrajOptConfig,
    #[serde(default)]
    pub mpc: MpcConfig,
    #[serde(default)]
    pub disturbances: Vec<Disturbance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Scenario {
    pub fn duration(&self) -> f64 {
        self.knots as f64 * self.h
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::Io { path: path.into(), source: e })
    }
}

/// A scenario together with the directory its paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub path: PathBuf,
    pub base: PathBuf,
}

impl LoadedScenario {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn load_model(&self) -> Result<ModelSpec> {
        ModelSpec::load(self.resolve(&self.scenario.model))
    }

    pub fn load_terrains(&self) -> Result<(TerrainModel, TerrainModel)> {
        let t = &self.scenario.terrain;
        Ok((TerrainModel::load(self.resolve(&t.sim))?, TerrainModel::load(self.resolve(&t.mpc))?))
    }

    pub fn keypoints_path(&self) -> PathBuf {
        self.resolve(&self.scenario.keypoints)
    }
}

fn schema_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Schema { path: path.display().to_string(), message: e.to_string() }
}

fn read_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    serde_json::from_str(&text).map_err(|e| schema_error(path, e))
}

/// Finds a scenario by path, or by name under `<root>/scenarios/` where the
/// root comes from the environment and defaults to the working directory.
pub fn locate(arg: &str) -> PathBuf {
    let p = PathBuf::from(arg);
    if p.exists() || arg.ends_with(".json") || arg.contains('/') {
        return p;
    }
    let root = std::env::var_os(ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    root.join("scenarios").join(format!("{arg}.json"))
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<LoadedScenario> {
    let path = path.as_ref();
    let value = read_value(path)?;
    let scenario: Scenario = serde_json::from_value(value).map_err(|e| schema_error(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(LoadedScenario { scenario, path: path.to_path_buf(), base })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub scenario: String,
    pub violations: Vec<Violation>,
    /// Unknown fields; ignored when loading.
    pub warnings: Vec<String>,
    /// Fields absent from the file and filled with defaults.
    pub defaulted: Vec<String>,
    /// `T * h`, s.
    pub duration: Option<f64>,
    pub h: Option<f64>,
    pub knots: Option<usize>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn violation(&mut self, field: &str, message: impl std::fmt::Display) {
        self.violations.push(Violation { field: field.into(), message: message.to_string() });
    }

    fn error(&mut self, prefix: &str, e: Error) {
        match e {
            Error::InvalidParameter { field, reason } => self.violation(&format!("{prefix}.{field}"), reason),
            other => self.violation(prefix, other),
        }
    }
}

fn compare_fields(prefix: &str, input: &Value, canonical: &Value, report: &mut ValidationReport) {
    let (Value::Object(given), Value::Object(full)) = (input, canonical) else {
        return;
    };
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    for (k, v) in full {
        match given.get(k) {
            None => report.defaulted.push(join(k)),
            Some(g) => compare_fields(&join(k), g, v, report),
        }
    }
    for k in given.keys() {
        if !full.contains_key(k) {
            report.warnings.push(format!("unknown field `{}` ignored", join(k)));
        }
    }
}

/// Checks a scenario without running it: schema, config ranges, referenced
/// files, and that the key points resample to exactly `knots` points.
pub fn validate_scenario(path: impl AsRef<Path>) -> ValidationReport {
    let path = path.as_ref();
    let mut report = ValidationReport { scenario: path.display().to_string(), ..Default::default() };
    let value = match read_value(path) {
        Ok(v) => v,
        Err(e) => {
            report.violation("file", e);
            return report;
        }
    };
    let scenario: Scenario = match serde_json::from_value(value.clone()) {
        Ok(s) => s,
        Err(e) => {
            report.violation("schema", e);
            return report;
        }
    };
    let canonical = serde_json::to_value(&scenario).expect("scenario serializes");
    compare_fields("", &value, &canonical, &mut report);
    report.scenario = scenario.name.clone();
    report.h = Some(scenario.h);
    report.knots = Some(scenario.knots);
    report.duration = Some(scenario.duration());

    let s = &scenario;
    if !(s.h > 0.0 && s.h.is_finite()) {
        report.violation("h", "must be > 0");
    }
    if s.knots < 2 {
        report.violation("knots", "need at least 2 knot points");
    }
    if let Err(e) = s.retarget.validate() {
        report.error("retarget", e);
    }
    if let Err(e) = s.trajopt.validate() {
        report.error("trajopt", e);
    }
    if let Err(e) = s.mpc.validate() {
        report.error("mpc", e);
    }
    if s.knots >= 2 && s.mpc.horizon >= s.knots {
        report.violation("mpc.horizon", format!("must not exceed the {} steps", s.knots - 1));
    }
    if s.knots >= 2 && s.h > 0.0 && s.mpc.update_rate > 0.0 {
        let m = 1.0 / (s.mpc.update_rate * s.h);
        if (m - m.round()).abs() > 1e-9 || m.round() < 1.0 {
            report.violation("mpc.update_rate", "must be 1/(m h) for a whole number m >= 1");
        }
    }
    for (i, d) in s.disturbances.iter().enumerate() {
        if !(d.time >= 0.0 && d.time.is_finite()) || d.impulse.iter().any(|x| !x.is_finite()) {
            report.violation(&format!("disturbances[{i}]"), "time must be >= 0 and the impulse finite");
        }
    }

    let loaded = LoadedScenario {
        scenario: scenario.clone(),
        path: path.to_path_buf(),
        base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let model = loaded.load_model().map_err(|e| report.violation("model", e)).ok();
    for (field, p) in [("terrain.sim", &s.terrain.sim), ("terrain.mpc", &s.terrain.mpc)] {
        if let Err(e) = TerrainModel::load(loaded.resolve(p)) {
            report.violation(field, e);
        }
    }
    match load_keypoints(loaded.keypoints_path()) {
        Err(e) => report.violation("keypoints", e),
        Ok(track) => {
            let times = track.frame_times();
            if s.h > 0.0 && s.h.is_finite() {
                let n = resample_times(times[0], *times.last().expect("validated"), s.h).len();
                if n != s.knots {
                    report.violation("knots", format!("key points resample to {n} points at h = {}, not {}", s.h, s.knots));
                }
                if let Some(model) = &model {
                    if let Err(e) = retarget(&track, model, &s.retarget, s.h) {
                        report.error("retarget", e);
                    }
                }
            }
        }
    }
    report
}
