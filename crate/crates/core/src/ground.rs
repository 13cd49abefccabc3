//! Ground-plane fitting and camera height recovery.
//!
//! Planar robot motion leaves the camera offset along the rotation axis
//! unobservable. Assuming the robot frame origin lies on the floor, that
//! offset is the camera's height above the floor, which can be read off
//! the reconstruction.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_ITERATIONS: usize = 500;
/// Meters.
pub const DEFAULT_THRESHOLD: f64 = 0.01;
pub const DEFAULT_SEED: u64 = 0x5EED;
/// Minimum inlier ratio when the points are known floor points.
pub const MASKED_CONSENSUS: f64 = 0.3;
/// Minimum inlier ratio when fitting to an unlabeled cloud.
pub const UNMASKED_CONSENSUS: f64 = 0.6;

/// `{p : normal . p = offset}` with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneModel {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl PlaneModel {
    /// Signed distance, positive on the normal side.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }

    /// Same plane with the normal flipped, if needed, to point at `p`.
    pub fn oriented_toward(&self, p: &Vector3<f64>) -> PlaneModel {
        if self.signed_distance(p) < 0.0 {
            PlaneModel {
                normal: -self.normal,
                offset: -self.offset,
            }
        } else {
            *self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub plane: PlaneModel,
    pub inliers: usize,
    pub inlier_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub threshold: f64,
    pub min_inlier_ratio: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            threshold: DEFAULT_THRESHOLD,
            min_inlier_ratio: MASKED_CONSENSUS,
            seed: DEFAULT_SEED,
        }
    }
}

/// RANSAC plane fit with least-squares refinement, using the default seed
/// and the masked-points consensus requirement. The normal is signed so
/// that its largest component is positive.
pub fn fit_plane(points: &[Vector3<f64>], iterations: usize, threshold: f64) -> Result<PlaneFit> {
    fit_plane_with(
        points,
        &RansacConfig {
            iterations,
            threshold,
            ..RansacConfig::default()
        },
    )
}

pub fn fit_plane_with(points: &[Vector3<f64>], cfg: &RansacConfig) -> Result<PlaneFit> {
    if points.len() < 3 {
        return Err(Error::InsufficientPoints(points.len()));
    }
    let (_, cov) = moments(points.iter());
    let eig = cov.symmetric_eigen();
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    if !(ev[1] > 1e-14 * ev[2].max(f64::MIN_POSITIVE)) {
        return Err(Error::InsufficientPoints(points.len()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = points.len();
    let mut best: Option<(usize, PlaneModel)> = None;
    for _ in 0..cfg.iterations.max(1) {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let k = rng.random_range(0..n);
        if i == j || j == k || i == k {
            continue;
        }
        let (a, b, c) = (points[i], points[j], points[k]);
        let cross = (b - a).cross(&(c - a));
        let scale = (b - a).norm() * (c - a).norm();
        if !(cross.norm() > 1e-9 * scale) {
            continue;
        }
        let normal = cross.normalize();
        let plane = PlaneModel {
            normal,
            offset: normal.dot(&a),
        };
        let count = count_inliers(points, &plane, cfg.threshold);
        if best.map_or(true, |(bc, _)| count > bc) {
            best = Some((count, plane));
        }
    }
    let (_, mut plane) = best.ok_or(Error::InsufficientPoints(n))?;
    // two rounds of least squares on the current inliers
    for _ in 0..2 {
        let inl: Vec<&Vector3<f64>> = points
            .iter()
            .filter(|p| plane.signed_distance(p).abs() <= cfg.threshold)
            .collect();
        if inl.len() < 3 {
            break;
        }
        let (mean, cov) = moments(inl.into_iter());
        let eig = cov.symmetric_eigen();
        let imin = eig.eigenvalues.imin();
        let normal: Vector3<f64> = eig.eigenvectors.column(imin).into_owned().normalize();
        plane = PlaneModel {
            normal,
            offset: normal.dot(&mean),
        };
    }
    let imax = plane.normal.iamax();
    if plane.normal[imax] < 0.0 {
        plane = PlaneModel {
            normal: -plane.normal,
            offset: -plane.offset,
        };
    }
    let inliers = count_inliers(points, &plane, cfg.threshold);
    let inlier_ratio = inliers as f64 / n as f64;
    if inlier_ratio < cfg.min_inlier_ratio {
        return Err(Error::NoConsensus {
            ratio: inlier_ratio,
            required: cfg.min_inlier_ratio,
        });
    }
    Ok(PlaneFit {
        plane,
        inliers,
        inlier_ratio,
    })
}

fn count_inliers(points: &[Vector3<f64>], plane: &PlaneModel, threshold: f64) -> usize {
    points
        .iter()
        .filter(|p| plane.signed_distance(p).abs() <= threshold)
        .count()
}

fn moments<'a>(points: impl Iterator<Item = &'a Vector3<f64>> + Clone) -> (Vector3<f64>, Matrix3<f64>) {
    let mut n = 0.0;
    let mut mean = Vector3::zeros();
    for p in points.clone() {
        mean += p;
        n += 1.0;
    }
    mean /= n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    (mean, cov / n)
}

/// Distance of a camera center from the plane.
pub fn camera_height(plane: &PlaneModel, center: &Vector3<f64>) -> f64 {
    plane.signed_distance(center).abs()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightEstimate {
    pub mean: f64,
    pub std: f64,
}

/// Mean camera height, with the population standard deviation as spread.
pub fn recover_z(heights: &[f64]) -> Result<HeightEstimate> {
    if heights.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = heights.len() as f64;
    let mean = heights.iter().sum::<f64>() / n;
    let std = (heights.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(HeightEstimate { mean, std })
}
