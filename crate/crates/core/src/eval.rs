//! Calibration error and metric-scale accuracy.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{backproject, rotation_angle, Intrinsics, RigidTransform};
use crate::pointmap::ViewRecord;

/// Checkerboard layout: inner-corner counts and square size in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoardSpec {
    pub rows: usize,
    pub cols: usize,
    pub square: f64,
}

/// Mean translation error (m) and mean rotation error (rad) over cameras.
pub fn calib_errors(estimated: &[RigidTransform], truth: &[RigidTransform]) -> Result<(f64, f64)> {
    if estimated.len() != truth.len() {
        return Err(Error::LengthMismatch(estimated.len(), truth.len()));
    }
    if estimated.is_empty() {
        return Err(Error::EmptyInput);
    }
    let m = estimated.len() as f64;
    let mut et = 0.0;
    let mut er = 0.0;
    for (e, t) in estimated.iter().zip(truth) {
        et += (e.translation - t.translation).norm();
        er += rotation_angle(&t.rotation, &e.rotation);
    }
    Ok((et / m, er / m))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleAccuracy {
    /// Mean reconstructed square size, meters.
    pub mean: f64,
    /// Standard deviation of all adjacent-corner distances, meters.
    pub std: f64,
    /// `|mean - square| / square * 100`.
    pub error_percent: f64,
}

/// Square-size statistics of lifted board detections, each holding
/// `rows * cols` corners in row-major order.
pub fn scale_accuracy(detections: &[Vec<Vector3<f64>>], board: &BoardSpec) -> Result<ScaleAccuracy> {
    let full: Vec<_> = detections
        .iter()
        .filter(|d| d.len() == board.rows * board.cols)
        .collect();
    if full.is_empty() {
        return Err(Error::NoDetections);
    }
    if !(board.square > 0.0) {
        return Err(Error::InvalidConfig(format!("square size {} must be positive", board.square)));
    }
    let mut pooled = Vec::new();
    let mut per_detection = Vec::with_capacity(full.len());
    for det in full {
        let at = |r: usize, c: usize| det[r * board.cols + c];
        let start = pooled.len();
        for r in 0..board.rows {
            for c in 0..board.cols {
                if c + 1 < board.cols {
                    pooled.push((at(r, c + 1) - at(r, c)).norm());
                }
                if r + 1 < board.rows {
                    pooled.push((at(r + 1, c) - at(r, c)).norm());
                }
            }
        }
        let d = &pooled[start..];
        per_detection.push(d.iter().sum::<f64>() / d.len() as f64);
    }
    let mean = per_detection.iter().sum::<f64>() / per_detection.len() as f64;
    let pm = pooled.iter().sum::<f64>() / pooled.len() as f64;
    let std = (pooled.iter().map(|d| (d - pm).powi(2)).sum::<f64>() / pooled.len() as f64).sqrt();
    Ok(ScaleAccuracy {
        mean,
        std,
        error_percent: scale_error_percent(mean, board.square),
    })
}

pub fn scale_error_percent(mean: f64, square: f64) -> f64 {
    (mean - square).abs() / square * 100.0
}

/// Lifts detected corner pixels to 3D with a view's depth, scaled by
/// `depth_scale` and placed with `pose`. Returns `None` when a corner falls
/// on invalid depth.
pub fn lift_corners(
    view: &ViewRecord,
    corners: &[Vector2<f64>],
    k: &Intrinsics,
    pose: &RigidTransform,
    depth_scale: f64,
) -> Result<Option<Vec<Vector3<f64>>>> {
    let depth = view.depth();
    let mut out = Vec::with_capacity(corners.len());
    for c in corners {
        let Some(z) = depth.sample(c) else {
            return Ok(None);
        };
        out.push(backproject(c, z, depth_scale, k, pose)?);
    }
    Ok(Some(out))
}
