//! Writes the preset models and terrains into a data directory.
//!
//! cargo run --example export_presets -- data

use std::path::PathBuf;

use legmimic::model::{build_humanoid, build_quadruped, HumanoidParams, QuadrupedParams};
use legmimic::terrain::TerrainModel;

fn main() -> legmimic::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    for d in ["models", "terrains"] {
        std::fs::create_dir_all(root.join(d)).map_err(|e| legmimic::Error::Io { path: root.join(d), source: e })?;
    }
    build_quadruped(&QuadrupedParams::default())?.save(root.join("models/quadruped.json"))?;
    build_humanoid(&HumanoidParams::default())?.save(root.join("models/humanoid.json"))?;
    TerrainModel::flat(0.0).save(root.join("terrains/flat.json"))?;
    TerrainModel::step(0.0, 0.10).save(root.join("terrains/step_0.10.json"))?;
    TerrainModel::step(0.0, 0.12).save(root.join("terrains/step_0.12.json"))?;
    Ok(())
}
