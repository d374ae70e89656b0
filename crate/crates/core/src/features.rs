//! Inside (head motion) and outside (road context) feature construction.
//!
//! Per frame, tracked facial points matched between successive frames give
//! `φ(face)`: a 4-bin histogram of horizontal motion with edges
//! `(−∞,−2], (−2,0], (0,2], (2,∞)` pixels, a 4-bin histogram of motion angle
//! over `[0,π/2), [π/2,π), [π,3π/2), [3π/2,2π)`, and the magnitude of the
//! mean face-center displacement. Head-pose mode appends yaw, pitch and roll.
//! Every 20 frames are summed and L2-normalized into one `z_t`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::SequenceSample;

pub const HISTOGRAM_DIM: usize = 9;
pub const HEAD_POSE_DIM: usize = 12;
pub const OUTSIDE_DIM: usize = 6;
/// Frames per aggregated step (0.8 s at 25 fps).
pub const DEFAULT_WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    #[default]
    Histogram,
    HeadPose,
}

impl FeatureMode {
    pub fn dim(self) -> usize {
        match self {
            FeatureMode::Histogram => HISTOGRAM_DIM,
            FeatureMode::HeadPose => HEAD_POSE_DIM,
        }
    }
}

/// Motion of one tracked facial point between successive frames, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMotion {
    pub dx: f64,
    pub dy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMotion {
    pub matches: Vec<PointMotion>,
    /// Mean face-center displacement `(dx, dy)` in pixels.
    pub center_motion: [f64; 2],
    /// `(yaw, pitch, roll)` in radians.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<[f64; 3]>,
}

fn horizontal_bin(dx: f64) -> usize {
    if dx <= -2.0 {
        0
    } else if dx <= 0.0 {
        1
    } else if dx <= 2.0 {
        2
    } else {
        3
    }
}

fn angular_bin(dx: f64, dy: f64) -> usize {
    let mut angle = dy.atan2(dx);
    if angle < 0.0 {
        angle += TAU;
    }
    // atan2 of a tiny negative dy can round up to exactly 2π.
    if angle >= TAU {
        angle = 0.0;
    }
    if angle < FRAC_PI_2 {
        0
    } else if angle < PI {
        1
    } else if angle < 3.0 * FRAC_PI_2 {
        2
    } else {
        3
    }
}

/// `φ(face)` for a single frame.
pub fn frame_features(fm: &FrameMotion, mode: FeatureMode) -> Result<Vec<f64>> {
    let finite = fm
        .matches
        .iter()
        .flat_map(|m| [m.dx, m.dy])
        .chain(fm.center_motion)
        .chain(fm.pose.into_iter().flatten())
        .all(f64::is_finite);
    if !finite {
        return Err(Error::NonFinite("frame motion record".into()));
    }
    let mut phi = vec![0.0; mode.dim()];
    for m in &fm.matches {
        phi[horizontal_bin(m.dx)] += 1.0;
        phi[4 + angular_bin(m.dx, m.dy)] += 1.0;
    }
    phi[8] = fm.center_motion[0].hypot(fm.center_motion[1]);
    match (mode, fm.pose) {
        (FeatureMode::Histogram, _) => {}
        (FeatureMode::HeadPose, Some(pose)) => phi[9..12].copy_from_slice(&pose),
        (FeatureMode::HeadPose, None) => {
            return Err(Error::Invalid("head-pose mode requires a pose on every frame".into()))
        }
    }
    Ok(phi)
}

/// Divides by the Euclidean norm; an all-zero vector passes through unchanged.
pub fn normalize_inside(sum: Vec<f64>) -> Vec<f64> {
    let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        log::warn!("inside feature window is all zero; emitting zero vector");
        return sum;
    }
    sum.into_iter().map(|v| v / norm).collect()
}

/// `z_t = Σφ / ‖Σφ‖` over exactly `window` frames.
pub fn aggregate_inside(frames: &[Vec<f64>], window: usize) -> Result<Vec<f64>> {
    if frames.len() != window {
        return Err(Error::Invalid(format!(
            "inside aggregation expects {window} frames, got {}",
            frames.len()
        )));
    }
    let dim = frames.first().map_or(0, Vec::len);
    let mut sum = vec![0.0; dim];
    for f in frames {
        if f.len() != dim {
            return Err(Error::dim("aggregate_inside frame", dim, f.len()));
        }
        for (s, v) in sum.iter_mut().zip(f) {
            *s += v;
        }
    }
    Ok(normalize_inside(sum))
}

/// `[lane_left, lane_right, artifact_within_15m, speed_avg, speed_max, speed_min]`
/// with speeds in km/h.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutsideFeature(pub [f64; OUTSIDE_DIM]);

impl OutsideFeature {
    pub fn to_vec(self) -> Vec<f64> {
        self.0.to_vec()
    }
}

/// Assembles `x_t` from lane flags, the road-artifact flag and the speeds
/// observed over the last 5 seconds.
pub fn outside_features(
    lane_left: bool,
    lane_right: bool,
    near_artifact: bool,
    speeds: &[f64],
) -> Result<OutsideFeature> {
    if speeds.is_empty() {
        return Err(Error::Empty("speed window"));
    }
    if speeds.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("speed".into()));
    }
    let avg = speeds.iter().sum::<f64>() / speeds.len() as f64;
    let max = speeds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = speeds.iter().copied().fold(f64::INFINITY, f64::min);
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    Ok(OutsideFeature([
        flag(lane_left),
        flag(lane_right),
        flag(near_artifact),
        avg.clamp(min, max),
        max,
        min,
    ]))
}

/// Per-coordinate affine standardization fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Fits mean and standard deviation of one stream over every step of
    /// every sample. Constant coordinates keep scale 1.
    pub fn fit(dataset: &[SequenceSample], stream: impl Fn(&SequenceSample) -> &Vec<Vec<f64>>) -> Result<Self> {
        let dim = dataset
            .iter()
            .find_map(|s| stream(s).first().map(Vec::len))
            .ok_or(Error::Empty("dataset"))?;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        for s in dataset {
            for v in stream(s) {
                if v.len() != dim {
                    return Err(Error::dim("Standardizer::fit", dim, v.len()));
                }
                for k in 0..dim {
                    sum[k] += v[k];
                    sq[k] += v[k] * v[k];
                }
                n += 1;
            }
        }
        let n = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn apply_seq(&self, seq: &[Vec<f64>]) -> Vec<Vec<f64>> {
        seq.iter().map(|v| self.apply(v)).collect()
    }
}
