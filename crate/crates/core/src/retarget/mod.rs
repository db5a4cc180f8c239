//! Key-point tracks and their mapping onto model reference states.
//!
//! Track files are JSON:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "source_meta": { "any": "thing" },
//!   "frames": [ { "t": 0.0, "points": { "body": [0, 0, 0.3], "front_left": [0.19, 0.13, 0] } } ]
//! }
//! ```

pub mod synthetic;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{pack_state, ModelSpec, State, StateParts};
use crate::mrp;

pub const KEYPOINT_SCHEMA_VERSION: u32 = 1;
pub const BODY: &str = "body";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: f64,
    pub points: BTreeMap<String, [f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointTrack {
    pub schema_version: u32,
    #[serde(default)]
    pub source_meta: serde_json::Value,
    pub frames: Vec<Frame>,
}

impl KeypointTrack {
    pub fn new(frames: Vec<Frame>, source_meta: serde_json::Value) -> Result<Self> {
        let track = KeypointTrack {
            schema_version: KEYPOINT_SCHEMA_VERSION,
            source_meta,
            frames,
        };
        track.validate()?;
        Ok(track)
    }

    pub fn frame_times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.t).collect()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.frames.first().map(|f| f.points.keys().cloned().collect()).unwrap_or_default()
    }

    pub fn point(&self, frame: usize, name: &str) -> Option<Vector3<f64>> {
        self.frames.get(frame)?.points.get(name).map(crate::util::vec3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != KEYPOINT_SCHEMA_VERSION {
            return Err(Error::Schema {
                path: "schema_version".into(),
                message: format!("unsupported version {}", self.schema_version),
            });
        }
        let Some(first) = self.frames.first() else {
            return Err(Error::Schema {
                path: "frames".into(),
                message: "frame list is empty".into(),
            });
        };
        if !first.points.contains_key(BODY) {
            return Err(Error::Schema {
                path: "frames[0].points".into(),
                message: format!("missing required point `{BODY}`"),
            });
        }
        for (i, f) in self.frames.iter().enumerate() {
            if !f.t.is_finite() {
                return Err(Error::Schema {
                    path: format!("frames[{i}].t"),
                    message: "must be finite".into(),
                });
            }
            if i > 0 && !(f.t > self.frames[i - 1].t) {
                return Err(Error::NonMonotoneTimes { index: i, time: f.t });
            }
            for name in first.points.keys() {
                if !f.points.contains_key(name) {
                    return Err(Error::Schema {
                        path: format!("frames[{i}].points"),
                        message: format!("missing point `{name}`"),
                    });
                }
            }
            for (name, p) in &f.points {
                if p.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Schema {
                        path: format!("frames[{i}].points.{name}"),
                        message: "coordinates must be finite".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn load_keypoints(path: impl AsRef<Path>) -> Result<KeypointTrack> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let track: KeypointTrack = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    track.validate()?;
    Ok(track)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrientationSource {
    #[default]
    DerivedFromKeypoints,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetargetConfig {
    pub scale: f64,
    pub ground_offset: f64,
    /// Key-point name -> `body` or a limb name. Unmapped targets fall back
    /// to a key point with the target's own name.
    pub name_map: BTreeMap<String, String>,
    pub orientation_source: OrientationSource,
}

impl Default for RetargetConfig {
    fn default() -> Self {
        RetargetConfig {
            scale: 1.0,
            ground_offset: 0.0,
            name_map: BTreeMap::new(),
            orientation_source: OrientationSource::DerivedFromKeypoints,
        }
    }
}

impl RetargetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid("scale", "must be > 0"));
        }
        if !self.ground_offset.is_finite() {
            return Err(Error::invalid("ground_offset", "must be finite"));
        }
        Ok(())
    }

    /// Key-point name feeding `target`.
    pub fn source_for(&self, target: &str) -> String {
        self.name_map
            .iter()
            .find(|(_, t)| t.as_str() == target)
            .map(|(k, _)| k.clone())
            .unwrap_or_else(|| target.to_string())
    }
}

/// Scales every point about the first-frame body point, then shifts the
/// track vertically so the lowest contact point over all frames sits at
/// `ground_offset`. Penetration confined to some frames is only removed to
/// the extent that this global shift removes it.
pub fn scale_and_ground(track: &KeypointTrack, config: &RetargetConfig) -> Result<KeypointTrack> {
    config.validate()?;
    track.validate()?;
    let body = config.source_for(BODY);
    let Some(anchor) = track.point(0, &body) else {
        return Err(Error::MissingMapping(body));
    };
    let mut out = track.clone();
    let mut min_contact = f64::INFINITY;
    for f in &mut out.frames {
        for (name, p) in f.points.iter_mut() {
            let v = anchor + (crate::util::vec3(p) - anchor) * config.scale;
            *p = [v.x, v.y, v.z];
            if *name != body {
                min_contact = min_contact.min(v.z);
            }
        }
    }
    if min_contact.is_finite() {
        let shift = config.ground_offset - min_contact;
        for f in &mut out.frames {
            for p in f.points.values_mut() {
                p[2] += shift;
            }
        }
    }
    Ok(out)
}

/// Uniform grid `t0, t0 + h, ...` up to `t_last`; `t_last` itself is
/// appended when the grid does not land on it.
pub fn resample_times(t0: f64, t_last: f64, h: f64) -> Vec<f64> {
    let span = t_last - t0;
    let n = (span / h + 1e-9).floor() as usize;
    let mut out: Vec<f64> = (0..=n).map(|k| t0 + k as f64 * h).collect();
    let last = out[n];
    if t_last - last > 1e-9 * h {
        out.push(t_last);
    } else if n > 0 {
        out[n] = t_last;
    }
    out
}

/// Linear interpolation onto a uniform grid of spacing `h`.
pub fn resample(track: &KeypointTrack, h: f64) -> Result<KeypointTrack> {
    track.validate()?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("h", "must be > 0"));
    }
    let times = track.frame_times();
    let (t0, t_last) = (times[0], *times.last().expect("validated"));
    let grid = if times.len() == 1 { vec![t0] } else { resample_times(t0, t_last, h) };
    let mut frames = Vec::with_capacity(grid.len());
    let mut seg = 0;
    for t in grid {
        while seg + 2 < times.len() && times[seg + 1] <= t {
            seg += 1;
        }
        let frame = if times.len() == 1 {
            track.frames[0].clone()
        } else {
            let (a, b) = (&track.frames[seg], &track.frames[seg + 1]);
            let s = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
            let points = a
                .points
                .iter()
                .map(|(name, pa)| {
                    let pb = b.points[name];
                    let p = if s == 0.0 {
                        *pa
                    } else if s == 1.0 {
                        pb
                    } else {
                        [0, 1, 2].map(|k| pa[k] + s * (pb[k] - pa[k]))
                    };
                    (name.clone(), p)
                })
                .collect();
            Frame { t, points }
        };
        frames.push(Frame { t, ..frame });
    }
    Ok(KeypointTrack {
        schema_version: track.schema_version,
        source_meta: track.source_meta.clone(),
        frames,
    })
}

/// Heading (yaw) implied by one frame, or `None` when the limb names give
/// no forward direction.
fn frame_heading(model: &ModelSpec, body: &Vector3<f64>, limbs: &[Vector3<f64>]) -> Option<f64> {
    let centroid = |pred: &dyn Fn(&str) -> bool| {
        let pts: Vec<&Vector3<f64>> = model
            .limbs
            .iter()
            .zip(limbs)
            .filter(|(l, _)| pred(&l.name))
            .map(|(_, p)| p)
            .collect();
        (!pts.is_empty()).then(|| pts.iter().fold(Vector3::zeros(), |a, p| a + *p) / pts.len() as f64)
    };
    if let Some(front) = centroid(&|n| n.starts_with("front_")) {
        let d = front - centroid(&|n| n.starts_with("rear_")).unwrap_or(*body);
        return (d.x.hypot(d.y) > 1e-9).then(|| d.y.atan2(d.x));
    }
    // Feet set the heading when present; hands move too freely.
    let feet = |side: &'static str| centroid(&move |n| n.starts_with(side) && n.ends_with("_foot"));
    let (left, right) = match (feet("left_"), feet("right_")) {
        (Some(l), Some(r)) => (l, r),
        _ => (
            centroid(&|n| n.starts_with("left_"))?,
            centroid(&|n| n.starts_with("right_"))?,
        ),
    };
    let d = left - right;
    (d.x.hypot(d.y) > 1e-9).then(|| d.y.atan2(d.x) - std::f64::consts::FRAC_PI_2)
}

fn central_difference(values: &[Vector3<f64>], times: &[f64]) -> Vec<Vector3<f64>> {
    let n = values.len();
    (0..n)
        .map(|i| {
            if n == 1 {
                Vector3::zeros()
            } else if i == 0 {
                (values[1] - values[0]) / (times[1] - times[0])
            } else if i == n - 1 {
                (values[n - 1] - values[n - 2]) / (times[n - 1] - times[n - 2])
            } else {
                (values[i + 1] - values[i - 1]) / (times[i + 1] - times[i - 1])
            }
        })
        .collect()
}

/// Reference states `x*_t`, one per frame. Orientations are level with the
/// derived heading (or identity); rigid feet share the body heading.
/// Velocities are central differences of the positions and of the unwrapped
/// heading.
pub fn map_to_reference_states(track: &KeypointTrack, model: &ModelSpec, config: &RetargetConfig) -> Result<Vec<State>> {
    config.validate()?;
    track.validate()?;
    let names = track.names();
    let body_key = config.source_for(BODY);
    if !names.contains(&body_key) {
        return Err(Error::MissingMapping(body_key));
    }
    let limb_keys: Vec<String> = model.limbs.iter().map(|l| config.source_for(&l.name)).collect();
    for k in &limb_keys {
        if !names.contains(k) {
            return Err(Error::MissingMapping(k.clone()));
        }
    }
    let times = track.frame_times();
    let n = track.len();
    let body: Vec<Vector3<f64>> = (0..n).map(|i| track.point(i, &body_key).expect("validated")).collect();
    let limbs: Vec<Vec<Vector3<f64>>> = limb_keys
        .iter()
        .map(|k| (0..n).map(|i| track.point(i, k).expect("validated")).collect())
        .collect();
    let mut yaw = vec![0.0; n];
    if config.orientation_source == OrientationSource::DerivedFromKeypoints {
        let mut prev: Option<f64> = None;
        for i in 0..n {
            let frame_limbs: Vec<Vector3<f64>> = limbs.iter().map(|l| l[i]).collect();
            let raw = frame_heading(model, &body[i], &frame_limbs).or(prev).unwrap_or(0.0);
            let y = match prev {
                Some(p) => p + wrap_angle(raw - p),
                None => raw,
            };
            yaw[i] = y;
            prev = Some(y);
        }
    }
    let yaw_vec: Vec<Vector3<f64>> = yaw.iter().map(|y| Vector3::new(0.0, 0.0, *y)).collect();
    let yaw_rate = central_difference(&yaw_vec, &times);
    let body_vel = central_difference(&body, &times);
    let limb_vel: Vec<Vec<Vector3<f64>>> = limbs.iter().map(|l| central_difference(l, &times)).collect();
    (0..n)
        .map(|i| {
            let sigma = mrp::rechart(&mrp::from_yaw(yaw[i]));
            let mut parts = StateParts::zeros(model);
            parts.body_position = body[i];
            parts.body_orientation = sigma;
            parts.body_velocity = body_vel[i];
            parts.body_angular_velocity = yaw_rate[i];
            for (j, lp) in parts.limbs.iter_mut().enumerate() {
                lp.position = limbs[j][i];
                lp.velocity = limb_vel[j][i];
                if lp.orientation.is_some() {
                    lp.orientation = Some(sigma);
                    lp.angular_velocity = Some(yaw_rate[i]);
                }
            }
            pack_state(model, &parts)
        })
        .collect()
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut x = a % two_pi;
    if x > std::f64::consts::PI {
        x -= two_pi;
    } else if x < -std::f64::consts::PI {
        x += two_pi;
    }
    x
}

/// Output of the retargeting stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetargetedReference {
    pub model: String,
    pub h: f64,
    pub times: Vec<f64>,
    pub states: Vec<State>,
}

impl RetargetedReference {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Scale, ground, resample and map in one call.
pub fn retarget(track: &KeypointTrack, model: &ModelSpec, config: &RetargetConfig, h: f64) -> Result<RetargetedReference> {
    let grounded = scale_and_ground(track, config)?;
    let sampled = resample(&grounded, h)?;
    let states = map_to_reference_states(&sampled, model, config)?;
    Ok(RetargetedReference {
        model: model.name.clone(),
        h,
        times: sampled.frame_times(),
        states,
    })
}
