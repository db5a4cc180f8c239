//! Foot heights of the key-point (s1), optimized (s2) and tracked (s3)
//! stages on a common knot index.

use std::path::Path;

use legmimic::model::{ModelSpec, State};
use legmimic::terrain::TerrainModel;
use legmimic::{Error, Result};
use nalgebra::DVector;

pub const STAGES: [&str; 3] = ["s1", "s2", "s3"];

/// Every channel name for `model`, stage-major.
pub fn plot_channels(model: &ModelSpec) -> Vec<String> {
    let names = model.contact_names();
    STAGES.iter().flat_map(|s| names.iter().map(move |n| format!("{s}_{n}"))).collect()
}

/// State sequences of the three stages with the terrain each is measured
/// against.
pub struct PlotSources<'a> {
    pub model: &'a ModelSpec,
    /// Knot times of the key-point stage, s.
    pub times: &'a [f64],
    pub keypoints: &'a [State],
    pub optimized: &'a [State],
    pub tracked: &'a [State],
    /// Terrain the key points and the optimized motion were planned on.
    pub plan_terrain: &'a TerrainModel,
    /// Terrain the tracked motion ran on.
    pub sim_terrain: &'a TerrainModel,
}

/// Signed distance of every contact to its stage's terrain. Rows are knot
/// indices; cells past the end of a shorter stage are empty.
pub fn emit_plot_data(src: &PlotSources, channels: &[String], path: impl AsRef<Path>) -> Result<()> {
    let valid = plot_channels(src.model);
    let nc = src.model.n_contacts();
    let mut cols = Vec::with_capacity(channels.len());
    for ch in channels {
        match valid.iter().position(|v| v == ch) {
            Some(i) => cols.push((i / nc, i % nc)),
            None => return Err(Error::UnknownChannel { name: ch.clone(), valid: valid.join(", ") }),
        }
    }
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(channels.iter().cloned());
    w.write_record(&header)?;
    if !channels.is_empty() {
        let stages = [
            (src.keypoints, src.plan_terrain),
            (src.optimized, src.plan_terrain),
            (src.tracked, src.sim_terrain),
        ];
        let gaps: Vec<Vec<Vec<f64>>> = stages
            .iter()
            .map(|(states, terrain)| {
                states
                    .iter()
                    .map(|s| src.model.contact_points(&s.q).iter().map(|c| terrain.signed_distance(&c.position)).collect())
                    .collect()
            })
            .collect();
        let rows = gaps.iter().map(Vec::len).max().unwrap_or(0);
        let dt = match src.times {
            [a, b, ..] => b - a,
            _ => 0.0,
        };
        for k in 0..rows {
            let t = src.times.get(k).copied().unwrap_or_else(|| src.times.last().copied().unwrap_or(0.0) + dt * (k + 1 - src.times.len()) as f64);
            let mut row = vec![fmt(t)];
            for &(stage, c) in &cols {
                row.push(gaps[stage].get(k).map(|g| fmt(g[c])).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::Io { path: path.into(), source: e })
}

fn fmt(x: f64) -> String {
    format!("{x:.12e}")
}

/// Measured states from a `track.csv` written by the tracking stage,
/// including its final-state row.
pub fn read_tracked_states(model: &ModelSpec, path: impl AsRef<Path>) -> Result<Vec<State>> {
    let path = path.as_ref();
    let mut rd = csv::Reader::from_path(path)?;
    let header = rd.headers()?.clone();
    let find = |name: String| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Schema {
            path: path.display().to_string(),
            message: format!("missing column `{name}`"),
        })
    };
    let qi: Vec<usize> = (0..model.n_q).map(|i| find(format!("q{i}"))).collect::<Result<_>>()?;
    let vi: Vec<usize> = (0..model.n_v).map(|i| find(format!("v{i}"))).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let get = |i: usize| {
            rec[i].parse::<f64>().map_err(|e| Error::Schema { path: path.display().to_string(), message: e.to_string() })
        };
        let q = DVector::from_vec(qi.iter().map(|&i| get(i)).collect::<Result<_>>()?);
        let v = DVector::from_vec(vi.iter().map(|&i| get(i)).collect::<Result<_>>()?);
        out.push(State { q, v });
    }
    Ok(out)
}
