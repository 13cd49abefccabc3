//! Dense pointmaps, confidence-weighted fusion and constrained pointmaps.
//!
//! Pixel `(col, row)` has its center at `(u, v) = (col, row)`. A pixel with
//! zero confidence is invalid: its point value is unspecified and is never
//! read by the losses.

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{backproject, Intrinsics, RigidTransform};

/// H x W grid of 3D points with per-pixel confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointmap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vector3<f64>>,
    pub confidence: Vec<f64>,
}

impl Pointmap {
    pub fn new(
        width: usize,
        height: usize,
        points: Vec<Vector3<f64>>,
        confidence: Vec<f64>,
    ) -> Result<Self> {
        let map = Self {
            width,
            height,
            points,
            confidence,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if n == 0 || self.points.len() != n || self.confidence.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} grid with {} points and {} confidences",
                self.width,
                self.height,
                self.points.len(),
                self.confidence.len()
            )));
        }
        if self.confidence.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidPointmap(
                "confidence must be finite and non-negative".into(),
            ));
        }
        if !self.confidence.iter().any(|&c| c > 0.0) {
            return Err(Error::InvalidPointmap("no valid pixel".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.confidence[idx] > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.confidence.iter().filter(|&&c| c > 0.0).count()
    }

    /// Valid points only.
    pub fn valid_points(&self) -> impl Iterator<Item = (usize, &Vector3<f64>)> {
        self.points
            .iter()
            .enumerate()
            .filter(|(i, _)| self.confidence[*i] > 0.0)
    }
}

/// Per-pixel confidence-weighted mean of several estimates of the same view.
///
/// The fused confidence is the sum of the contributing confidences; pixels
/// with zero total confidence stay invalid.
pub fn canonical_pointmap(estimates: &[Pointmap]) -> Result<Pointmap> {
    let first = estimates.first().ok_or(Error::EmptyEstimates)?;
    let (w, h) = (first.width, first.height);
    if estimates.iter().any(|e| e.width != w || e.height != h) {
        return Err(Error::DimensionMismatch(
            "pointmap estimates of one view differ in size".into(),
        ));
    }
    if let [single] = estimates {
        single.validate()?;
        return Ok(single.clone());
    }
    let n = w * h;
    let mut points = vec![Vector3::zeros(); n];
    let mut confidence = vec![0.0; n];
    for (idx, (point, conf)) in points.iter_mut().zip(confidence.iter_mut()).enumerate() {
        let mut acc = Vector3::zeros();
        let mut total = 0.0;
        for e in estimates {
            let c = e.confidence[idx];
            if c > 0.0 {
                acc += e.points[idx] * c;
                total += c;
            }
        }
        if total > 0.0 {
            *point = acc / total;
            *conf = total;
        }
    }
    Pointmap::new(w, h, points, confidence)
}

/// z-channel of a pointmap; pixels with invalid confidence or non-positive
/// depth are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        let i = row * self.width + col;
        self.valid[i].then_some(self.depth[i])
    }

    /// Depth at a sub-pixel location.
    ///
    /// Inverse depth is interpolated bilinearly over the four surrounding
    /// pixels, which all have to be valid. This is exact for planar surfaces,
    /// whose inverse depth is affine in pixel coordinates.
    pub fn sample(&self, pixel: &Vector2<f64>) -> Option<f64> {
        let (u, v) = (pixel.x, pixel.y);
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let c0 = u.floor() as usize;
        let r0 = v.floor() as usize;
        let fu = u - c0 as f64;
        let fv = v - r0 as f64;
        if c0 >= self.width || r0 >= self.height {
            return None;
        }
        let mut inv = 0.0;
        for (dr, wr) in [(0usize, 1.0 - fv), (1, fv)] {
            if wr == 0.0 {
                continue;
            }
            for (dc, wc) in [(0usize, 1.0 - fu), (1, fu)] {
                if wc == 0.0 {
                    continue;
                }
                let (c, r) = (c0 + dc, r0 + dr);
                if c >= self.width || r >= self.height {
                    return None;
                }
                inv += wr * wc / self.get(c, r)?;
            }
        }
        Some(1.0 / inv)
    }
}

/// Ground-floor pixel mask of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundMask {
    pub width: usize,
    pub height: usize,
    pub floor: Vec<bool>,
}

/// One image: its camera, robot pose index and fused pointmap.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub id: usize,
    pub camera: usize,
    pub pose_index: usize,
    pub canonical: Pointmap,
    pub intrinsics_prior: Option<Intrinsics>,
    pub ground_mask: Option<GroundMask>,
}

impl ViewRecord {
    pub fn width(&self) -> usize {
        self.canonical.width
    }

    pub fn height(&self) -> usize {
        self.canonical.height
    }

    pub fn depth(&self) -> DepthMap {
        depth_of(self)
    }
}

pub fn depth_of(view: &ViewRecord) -> DepthMap {
    let map = &view.canonical;
    let depth: Vec<f64> = map.points.iter().map(|p| p.z).collect();
    let valid = depth
        .iter()
        .zip(&map.confidence)
        .map(|(z, c)| *c > 0.0 && *z > 0.0 && z.is_finite())
        .collect();
    DepthMap {
        width: map.width,
        height: map.height,
        depth,
        valid,
    }
}

/// World-frame pointmap that satisfies the pinhole model of `k` and `pose`
/// exactly at every valid pixel.
pub fn constrained_pointmap(
    view: &ViewRecord,
    sigma: f64,
    k: &Intrinsics,
    pose: &RigidTransform,
) -> Result<Pointmap> {
    if !(sigma > 0.0) {
        return Err(Error::NonPositiveScale(sigma));
    }
    let depth = depth_of(view);
    let (w, h) = (depth.width, depth.height);
    let mut points = vec![Vector3::zeros(); w * h];
    let mut confidence = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            if let Some(z) = depth.get(col, row) {
                let pixel = Vector2::new(col as f64, row as f64);
                points[i] = backproject(&pixel, z, sigma, k, pose)?;
                confidence[i] = view.canonical.confidence[i];
            }
        }
    }
    Pointmap::new(w, h, points, confidence)
}

/// Pixel correspondence with weight `q >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub pixel_a: Vector2<f64>,
    pub pixel_b: Vector2<f64>,
    pub weight: f64,
}

/// Correspondences between two views, ordered `(view_a, view_b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub view_a: usize,
    pub view_b: usize,
    pub pairs: Vec<MatchPair>,
}

impl MatchSet {
    pub fn validate(&self, size_a: (usize, usize), size_b: (usize, usize)) -> Result<()> {
        let inside = |p: &Vector2<f64>, (w, h): (usize, usize)| {
            p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f64 && p.y <= (h - 1) as f64
        };
        for m in &self.pairs {
            if !(m.weight.is_finite() && m.weight >= 0.0) {
                return Err(Error::Parse(format!(
                    "match weight {} between views {} and {} is invalid",
                    m.weight, self.view_a, self.view_b
                )));
            }
            if !inside(&m.pixel_a, size_a) || !inside(&m.pixel_b, size_b) {
                return Err(Error::Parse(format!(
                    "match pixel outside image bounds between views {} and {}",
                    self.view_a, self.view_b
                )));
            }
        }
        Ok(())
    }

    /// Same correspondences with the roles of the two views exchanged.
    pub fn swapped(&self) -> MatchSet {
        MatchSet {
            view_a: self.view_b,
            view_b: self.view_a,
            pairs: self
                .pairs
                .iter()
                .map(|m| MatchPair {
                    pixel_a: m.pixel_b,
                    pixel_b: m.pixel_a,
                    weight: m.weight,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, Rotation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_map(w: usize, h: usize, p: Vector3<f64>, c: f64) -> Pointmap {
        Pointmap::new(w, h, vec![p; w * h], vec![c; w * h]).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Pointmap {
        let points = (0..w * h)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..3.0)))
            .collect();
        let confidence = (0..w * h).map(|_| rng.random_range(0.1..2.0)).collect();
        Pointmap::new(w, h, points, confidence).unwrap()
    }

    fn view_from(map: Pointmap) -> ViewRecord {
        ViewRecord {
            id: 0,
            camera: 0,
            pose_index: 0,
            canonical: map,
            intrinsics_prior: None,
            ground_mask: None,
        }
    }

    #[test]
    fn canonical_single_and_weighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = random_map(&mut rng, 4, 3);
        assert_eq!(canonical_pointmap(std::slice::from_ref(&one)).unwrap(), one);

        let p = Vector3::new(1.0, 2.0, 3.0);
        let q = Vector3::new(-1.0, 0.0, 7.0);
        let fused = canonical_pointmap(&[constant_map(2, 2, p, 1.0), constant_map(2, 2, q, 3.0)]).unwrap();
        for x in &fused.points {
            assert!((x - (p + q * 3.0) / 4.0).norm() < 1e-15);
        }
        assert!(fused.confidence.iter().all(|&c| c == 4.0));
    }

    #[test]
    fn canonical_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let estimates: Vec<_> = (0..5).map(|_| random_map(&mut rng, 6, 5)).collect();
        let fused = canonical_pointmap(&estimates).unwrap();
        for i in 0..30 {
            let mut num = Vector3::zeros();
            let mut den = 0.0;
            for e in &estimates {
                num += e.points[i] * e.confidence[i];
                den += e.confidence[i];
            }
            assert!((fused.points[i] - num / den).norm() < 1e-12);
            assert!((fused.confidence[i] - den).abs() < 1e-12);
        }
    }

    #[test]
    fn canonical_errors_and_invalid_pixels() {
        assert!(matches!(canonical_pointmap(&[]), Err(Error::EmptyEstimates)));
        let a = constant_map(2, 2, Vector3::z(), 1.0);
        let b = constant_map(3, 2, Vector3::z(), 1.0);
        assert!(matches!(canonical_pointmap(&[a.clone(), b]), Err(Error::DimensionMismatch(_))));

        let mut c = a.clone();
        c.confidence[1] = 0.0;
        let mut d = a.clone();
        d.confidence[1] = 0.0;
        d.points[1] = Vector3::new(9.0, 9.0, 9.0);
        let fused = canonical_pointmap(&[c, d]).unwrap();
        assert_eq!(fused.confidence[1], 0.0);
        assert!(!fused.is_valid(1));
    }

    #[test]
    fn canonical_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = canonical_pointmap(&[random_map(&mut rng, 5, 4), random_map(&mut rng, 5, 4)]).unwrap();
        let again = canonical_pointmap(&[m.clone(), m.clone()]).unwrap();
        for (a, b) in again.points.iter().zip(&m.points) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn depth_channel() {
        let v = view_from(constant_map(3, 2, Vector3::new(0.0, 0.0, 2.0), 1.0));
        assert!(depth_of(&v).depth.iter().all(|&z| z == 2.0));

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut map = random_map(&mut rng, 5, 5);
        map.confidence[7] = 0.0;
        let v = view_from(map.clone());
        let d = depth_of(&v);
        for i in 0..25 {
            assert_eq!(d.depth[i], map.points[i].z);
        }
        assert_eq!(d.get(2, 1), None);
    }

    #[test]
    fn inverse_depth_sampling_is_exact_on_planes() {
        // plane n.p = 1 viewed by a camera at the origin: 1/z is affine in (u, v)
        let k = Intrinsics::new(40.0, 42.0, 10.0, 8.0, 20, 16).unwrap();
        let n = Vector3::new(0.1, -0.2, 0.6);
        let depth_at = |u: f64, v: f64| 1.0 / n.dot(&k.ray(&Vector2::new(u, v)));
        let mut depth = Vec::new();
        for r in 0..16 {
            for c in 0..20 {
                depth.push(depth_at(c as f64, r as f64));
            }
        }
        let map = DepthMap { width: 20, height: 16, valid: vec![true; depth.len()], depth };
        for &(u, v) in &[(3.3, 4.7), (0.0, 0.0), (19.0, 15.0), (18.99, 7.5)] {
            let z = map.sample(&Vector2::new(u, v)).unwrap();
            assert!((z - depth_at(u, v)).abs() < 1e-12, "({u},{v})");
        }
        assert!(map.sample(&Vector2::new(19.5, 3.0)).is_none());
        assert!(map.sample(&Vector2::new(-0.1, 3.0)).is_none());
    }

    #[test]
    fn constrained_examples() {
        let k = Intrinsics::new(100.0, 100.0, 1.0, 1.0, 3, 3).unwrap();
        let v = view_from(constant_map(3, 3, Vector3::new(0.0, 0.0, 2.0), 1.0));
        let chi = constrained_pointmap(&v, 1.0, &k, &RigidTransform::identity()).unwrap();
        assert_eq!(chi.points[4], Vector3::new(0.0, 0.0, 2.0));

        let shift = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let moved = constrained_pointmap(&v, 1.0, &k, &shift).unwrap();
        for (a, b) in moved.points.iter().zip(&chi.points) {
            assert!((a - b - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        }
        assert!(matches!(
            constrained_pointmap(&v, 0.0, &k, &shift),
            Err(Error::NonPositiveScale(_))
        ));
    }

    #[test]
    fn constrained_round_trip_and_rigid_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = Intrinsics::new(30.0, 31.0, 4.5, 3.5, 10, 8).unwrap();
        let v = view_from(random_map(&mut rng, 10, 8));
        let pose = RigidTransform::new(Rotation::rx(0.3) * Rotation::ry(-0.5), Vector3::new(0.2, 1.0, -0.4));
        let chi = constrained_pointmap(&v, 1.7, &k, &pose).unwrap();
        for row in 0..8 {
            for col in 0..10 {
                let p = chi.points[row * 10 + col];
                let px = project(&pose.inverse().apply(&p), &k).unwrap();
                assert!((px - Vector2::new(col as f64, row as f64)).norm() < 1e-6);
            }
        }
        let g = RigidTransform::new(Rotation::rz(1.2), Vector3::new(-3.0, 0.5, 2.0));
        let chi_g = constrained_pointmap(&v, 1.7, &k, &(g * pose)).unwrap();
        for (a, b) in chi_g.points.iter().zip(&chi.points) {
            assert!((a - g.apply(b)).norm() < 1e-9);
        }
    }
}
