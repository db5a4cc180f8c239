//! Piecewise-flat height-field terrain.
//!
//! Regions are axis-aligned rectangles, closed on their lower x/y edges and
//! open on their upper edges, so a point on a shared boundary belongs to the
//! region whose lower-left edge contains it. Missing bounds are unbounded.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(default)]
    pub x_min: Option<f64>,
    #[serde(default)]
    pub x_max: Option<f64>,
    #[serde(default)]
    pub y_min: Option<f64>,
    #[serde(default)]
    pub y_max: Option<f64>,
    pub height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub friction_override: Option<f64>,
}

impl Region {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x_min.is_none_or(|m| x >= m)
            && self.x_max.is_none_or(|m| x < m)
            && self.y_min.is_none_or(|m| y >= m)
            && self.y_max.is_none_or(|m| y < m)
    }

    fn overlaps(&self, other: &Region) -> bool {
        fn interval(a0: Option<f64>, a1: Option<f64>, b0: Option<f64>, b1: Option<f64>) -> bool {
            let lo = a0.unwrap_or(f64::NEG_INFINITY).max(b0.unwrap_or(f64::NEG_INFINITY));
            let hi = a1.unwrap_or(f64::INFINITY).min(b1.unwrap_or(f64::INFINITY));
            lo < hi
        }
        interval(self.x_min, self.x_max, other.x_min, other.x_max)
            && interval(self.y_min, self.y_max, other.y_min, other.y_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainModel {
    #[serde(default)]
    pub regions: Vec<Region>,
    #[serde(default)]
    pub default_height: f64,
}

impl Default for TerrainModel {
    fn default() -> Self {
        TerrainModel::flat(0.0)
    }
}

impl TerrainModel {
    pub fn flat(height: f64) -> Self {
        TerrainModel {
            regions: vec![],
            default_height: height,
        }
    }

    /// Ground at zero with a raised half-plane `x >= edge_x`.
    pub fn step(edge_x: f64, height: f64) -> Self {
        TerrainModel {
            regions: vec![Region {
                x_min: Some(edge_x),
                x_max: None,
                y_min: None,
                y_max: None,
                height,
                friction_override: None,
            }],
            default_height: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.default_height.is_finite() {
            return Err(Error::invalid("default_height", "must be finite"));
        }
        for (i, r) in self.regions.iter().enumerate() {
            if !r.height.is_finite() {
                return Err(Error::invalid(format!("regions[{i}].height"), "must be finite"));
            }
            if let Some(mu) = r.friction_override {
                if !(mu >= 0.0) {
                    return Err(Error::invalid(
                        format!("regions[{i}].friction_override"),
                        "must be >= 0",
                    ));
                }
            }
            for (j, other) in self.regions.iter().enumerate().skip(i + 1) {
                if r.overlaps(other) {
                    return Err(Error::invalid(
                        format!("regions[{i}]"),
                        format!("overlaps regions[{j}]"),
                    ));
                }
            }
        }
        Ok(())
    }

    fn region_at(&self, x: f64, y: f64) -> Option<&Region> {
        self.regions.iter().find(|r| r.contains(x, y))
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.region_at(x, y).map_or(self.default_height, |r| r.height)
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        p.z - self.height(p.x, p.y)
    }

    pub fn surface_normal(&self, _p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::z()
    }

    /// Deterministic tangent pair `(x, y)`; with the normal it forms a
    /// right-handed frame.
    pub fn tangent_basis(&self, _p: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        (Vector3::x(), Vector3::y())
    }

    pub fn friction_at(&self, p: &Vector3<f64>, model_mu: f64) -> f64 {
        self.region_at(p.x, p.y)
            .and_then(|r| r.friction_override)
            .unwrap_or(model_mu)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let terrain: TerrainModel = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        terrain.validate()?;
        Ok(terrain)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}
