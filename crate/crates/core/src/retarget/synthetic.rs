//! Synthetic key-point tracks with optional injected artifacts.
//!
//! Quadruped patterns use the key points `body`, `front_left`, `front_right`,
//! `rear_left`, `rear_right`; humanoid patterns use `body`, `left_foot`,
//! `right_foot`, `left_hand`, `right_hand`. Frames sit at `t = k * dt` for
//! `k = 0 .. round(duration / dt)`, so `frames * dt = duration`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Frame, KeypointTrack};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Stand,
    Pace,
    Reach,
    Cpr,
    Stretch,
    Wave,
}

impl Pattern {
    pub const ALL: [Pattern; 6] = [
        Pattern::Stand,
        Pattern::Pace,
        Pattern::Reach,
        Pattern::Cpr,
        Pattern::Stretch,
        Pattern::Wave,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Stand => "stand",
            Pattern::Pace => "pace",
            Pattern::Reach => "reach",
            Pattern::Cpr => "cpr",
            Pattern::Stretch => "stretch",
            Pattern::Wave => "wave",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid("pattern", format!("unknown pattern `{s}`")))
    }

    pub fn is_humanoid(self) -> bool {
        matches!(self, Pattern::Stretch | Pattern::Wave)
    }

    /// `(dt, duration)` of the matching experiment.
    pub fn default_timing(self) -> (f64, f64) {
        match self {
            Pattern::Stand => (0.05, 1.0),
            Pattern::Pace => (0.05, 3.0),
            Pattern::Reach => (0.05, 5.0),
            Pattern::Cpr => (0.05, 0.65),
            Pattern::Stretch => (0.1, 3.8),
            Pattern::Wave => (0.1, 4.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    /// Frame spacing, s. Zero selects the pattern default.
    pub dt: f64,
    /// Track length, s. Zero selects the pattern default.
    pub duration: f64,
    /// Peak depth the artifact limbs sink below their support, m.
    pub penetration: f64,
    /// Horizontal drift of the rear (or right) supports over the track, m.
    pub foot_slip: f64,
    /// Uniform lift of every point, m.
    pub float_height: f64,
    /// Standard deviation of horizontal jitter, m.
    pub noise: f64,
    /// Raised support height under the front feet (cpr), m.
    pub step_height: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            dt: 0.0,
            duration: 0.0,
            penetration: 0.0,
            foot_slip: 0.0,
            float_height: 0.0,
            noise: 0.0,
            step_height: 0.1,
        }
    }
}

// Quadruped stance geometry, matching the default quadruped preset.
const QL: f64 = 0.19;
const QW: f64 = 0.13;
const QH: f64 = 0.3;
// Humanoid geometry, matching the default humanoid preset.
const HIP: f64 = 0.1;
const SHOULDER: f64 = 0.25;
const HH: f64 = 0.9;
const HAND_DROP: f64 = 0.1;

type Points = BTreeMap<String, [f64; 3]>;

fn put(points: &mut Points, name: &str, p: [f64; 3]) {
    points.insert(name.to_string(), p);
}

/// Smooth bump on `[0, 1]`, zero at both ends and 1 at the middle.
fn bump(s: f64) -> f64 {
    if (0.0..=1.0).contains(&s) {
        (PI * s).sin().powi(2)
    } else {
        0.0
    }
}

fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

/// Artifact limbs: the ones that sink under `penetration`.
fn artifact_limbs(pattern: Pattern) -> &'static [&'static str] {
    match pattern {
        Pattern::Stretch | Pattern::Wave => &["left_foot"],
        _ => &["front_left", "front_right"],
    }
}

fn slip_limbs(pattern: Pattern) -> &'static [&'static str] {
    match pattern {
        Pattern::Stretch | Pattern::Wave => &["right_foot"],
        _ => &["rear_left", "rear_right"],
    }
}

fn quadruped_frame(pattern: Pattern, t: f64, duration: f64, params: &SyntheticParams) -> Points {
    let mut p = Points::new();
    let feet = [
        ("front_left", QL, QW),
        ("front_right", QL, -QW),
        ("rear_left", -QL, QW),
        ("rear_right", -QL, -QW),
    ];
    match pattern {
        Pattern::Stand => {
            put(&mut p, "body", [0.0, 0.0, QH]);
            for (n, x, y) in feet {
                put(&mut p, n, [x, y, 0.0]);
            }
        }
        Pattern::Pace => {
            // Lateral-sequence walk: one foot swings at a time in the order
            // rear-left, front-left, rear-right, front-right, while the body
            // leans away from the swinging side.
            let period = 1.0;
            let stride = 0.15;
            let duty = 0.25;
            let offsets = [
                ("front_left", 0.25),
                ("front_right", 0.75),
                ("rear_left", 0.0),
                ("rear_right", 0.5),
            ];
            let mut xs = vec![];
            for ((n, x, y), (_, off)) in feet.into_iter().zip(offsets) {
                let phase = t / period - off;
                let cycle = phase.floor();
                let s = phase - cycle;
                let (advance, lift) = if s < duty {
                    (smoothstep(s / duty), 0.04 * (PI * s / duty).sin())
                } else {
                    (1.0, 0.0)
                };
                let fx = x + stride * (cycle + advance);
                xs.push(fx - x);
                put(&mut p, n, [fx, y, lift]);
            }
            let body_x = xs.iter().sum::<f64>() / 4.0;
            put(&mut p, "body", [body_x, -0.02 * (2.0 * PI * t / period).sin(), QH]);
        }
        Pattern::Reach => {
            // Front-left paw reaches forward and up twice.
            put(&mut p, "body", [0.0, 0.0, QH]);
            for (n, x, y) in feet {
                if n == "front_left" {
                    let cycle = (t / 2.5).fract();
                    let b = bump((cycle - 0.1) / 0.8);
                    put(&mut p, n, [x + 0.1 * b, y, 0.15 * b]);
                } else {
                    put(&mut p, n, [x, y, 0.0]);
                }
            }
        }
        Pattern::Cpr => {
            // Front paws on a raised support, body pumping down twice.
            let pump = 0.03 * bump((2.0 * t / duration).fract());
            let mid = params.step_height / 2.0;
            put(&mut p, "body", [0.0, 0.0, QH + mid - pump]);
            for (n, x, y) in feet {
                let z = if x > 0.0 { params.step_height } else { 0.0 };
                put(&mut p, n, [x, y, z]);
            }
        }
        Pattern::Stretch | Pattern::Wave => unreachable!(),
    }
    p
}

fn humanoid_frame(pattern: Pattern, t: f64, duration: f64) -> Points {
    let mut p = Points::new();
    put(&mut p, "left_foot", [0.0, HIP, 0.0]);
    put(&mut p, "right_foot", [0.0, -HIP, 0.0]);
    let rest = HH - HAND_DROP;
    match pattern {
        Pattern::Stretch => {
            // Both arms rise overhead and come back down; slight rise on the torso.
            let b = bump(t / duration);
            put(&mut p, "body", [0.0, 0.0, HH + 0.02 * b]);
            put(&mut p, "left_hand", [0.0, SHOULDER, rest + 0.7 * b]);
            put(&mut p, "right_hand", [0.0, -SHOULDER, rest + 0.7 * b]);
        }
        Pattern::Wave => {
            // Right hand raised to head height, waving side to side.
            let raise = smoothstep(t / 0.8) * smoothstep((duration - t) / 0.8);
            let sway = 0.1 * (2.0 * PI * t / 1.0).sin() * raise;
            put(&mut p, "body", [0.0, 0.0, HH]);
            put(&mut p, "left_hand", [0.0, SHOULDER, rest]);
            put(&mut p, "right_hand", [0.05 * raise, -SHOULDER - sway, rest + 0.6 * raise]);
        }
        _ => unreachable!(),
    }
    p
}

/// Deterministic key-point track for `pattern`; the same inputs always give
/// the same track.
pub fn generate_synthetic_keypoints(pattern: Pattern, params: &SyntheticParams, seed: u64) -> Result<KeypointTrack> {
    let (dt0, dur0) = pattern.default_timing();
    let dt = if params.dt > 0.0 { params.dt } else { dt0 };
    let duration = if params.duration > 0.0 { params.duration } else { dur0 };
    if !(dt.is_finite() && duration.is_finite()) {
        return Err(Error::invalid("dt", "must be finite"));
    }
    for (field, v) in [
        ("penetration", params.penetration),
        ("foot_slip", params.foot_slip),
        ("noise", params.noise),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::invalid(field, "must be >= 0"));
        }
    }
    if !params.float_height.is_finite() || !params.step_height.is_finite() {
        return Err(Error::invalid("float_height", "must be finite"));
    }
    let n = (duration / dt).round() as usize;
    if n == 0 {
        return Err(Error::invalid("duration", "must cover at least one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, params.noise).map_err(|e| Error::invalid("noise", e.to_string()))?;
    let span = (n - 1).max(1) as f64 * dt;
    let frames = (0..n)
        .map(|k| {
            let t = k as f64 * dt;
            let mut points = if pattern.is_humanoid() {
                humanoid_frame(pattern, t, duration)
            } else {
                quadruped_frame(pattern, t, duration, params)
            };
            // Penetration over the middle half of the track.
            let sink = params.penetration * bump((t / span - 0.25) / 0.5);
            for name in artifact_limbs(pattern) {
                if let Some(p) = points.get_mut(*name) {
                    p[2] -= sink;
                }
            }
            let slip = params.foot_slip * (t / span);
            for name in slip_limbs(pattern) {
                if let Some(p) = points.get_mut(*name) {
                    p[0] += slip;
                }
            }
            for p in points.values_mut() {
                p[2] += params.float_height;
                if params.noise > 0.0 {
                    p[0] += jitter.sample(&mut rng);
                    p[1] += jitter.sample(&mut rng);
                }
            }
            Frame { t, points }
        })
        .collect();
    let meta = serde_json::json!({
        "generator": "synthetic",
        "pattern": pattern.name(),
        "seed": seed,
        "params": params,
    });
    KeypointTrack::new(frames, meta)
}
