//! Closed-form AX = XB solvers.
//!
//! The rotation comes from the Kronecker-product null space of
//! `R_A R_X = R_X R_B`, projected onto SO(3); the translation from linear
//! least squares, optionally with an unknown camera-motion scale. A planar
//! variant handles single-axis robot motion, where the translation along
//! the rotation axis is unobservable.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{nearest_rotation, Rotation, RigidTransform};

/// Smallest angle (rad) for a rotation axis to count as defined.
const MIN_ROTATION: f64 = 1e-6;
/// Two rotation axes closer than this (rad) are considered parallel.
const MIN_AXIS_SEPARATION: f64 = 1e-3;
/// Singular-value threshold of the stacked `(R_A - I)` for unobservability.
pub const OBSERVABILITY_THRESHOLD: f64 = 1e-6;
/// Camera translations shorter than this carry no scale information.
const MIN_CAMERA_TRANSLATION: f64 = 1e-6;

/// One robot motion `A` paired with the camera motion `B` over the same interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionPair {
    pub robot: RigidTransform,
    pub camera: RigidTransform,
}

pub type MotionPairSet = [MotionPair];

/// Rank analysis of the stacked `(R_{A_i} - I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observability {
    /// Ascending.
    pub singular_values: [f64; 3],
    /// Right singular vector of the smallest singular value when it falls
    /// below [`OBSERVABILITY_THRESHOLD`].
    pub unobservable_axis: Option<Vector3<f64>>,
}

/// Detects translation directions that robot motions `A_i` cannot constrain.
///
/// The returned axis is signed so that its largest component is positive.
pub fn analyze_observability(robot_motions: &[RigidTransform]) -> Observability {
    let mut gram = Matrix3::zeros();
    for a in robot_motions {
        let m = a.rotation.matrix() - Matrix3::identity();
        gram += m.transpose() * m;
    }
    let eig = gram.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let singular_values = order.map(|i| eig.eigenvalues[i].max(0.0).sqrt());
    let unobservable_axis = (singular_values[0] <= OBSERVABILITY_THRESHOLD).then(|| {
        let v: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
        let imax = v.iamax();
        if v[imax] < 0.0 {
            -v
        } else {
            v
        }
    });
    Observability {
        singular_values,
        unobservable_axis,
    }
}

fn rotation_axes(rots: impl Iterator<Item = Rotation>) -> Vec<Vector3<f64>> {
    rots.filter_map(|r| {
        let w = r.log();
        let n = w.norm();
        (n > MIN_ROTATION).then(|| w / n)
    })
    .collect()
}

/// Fails unless the robot rotation axes span at least two directions.
fn check_axis_diversity(pairs: &MotionPairSet) -> Result<()> {
    if pairs.len() < 2 {
        return Err(Error::DegenerateMotion(format!(
            "need at least 2 motion pairs, got {}",
            pairs.len()
        )));
    }
    let axes = rotation_axes(pairs.iter().map(|p| p.robot.rotation));
    let Some(first) = axes.first() else {
        return Err(Error::DegenerateMotion("no robot rotation".into()));
    };
    let spread = axes
        .iter()
        .any(|a| a.cross(first).norm().asin() > MIN_AXIS_SEPARATION);
    if !spread {
        return Err(Error::DegenerateMotion(format!(
            "all robot rotations share the axis ({:.4}, {:.4}, {:.4}); the translation along it is unobservable",
            first.x, first.y, first.z
        )));
    }
    Ok(())
}

/// `R_X` minimizing `sum ||R_A R_X - R_X R_B||_F^2`.
fn solve_rotation(pairs: &MotionPairSet) -> Rotation {
    // column-major vec: vec(R_A X) = (I kron R_A) vec X, vec(X R_B) = (R_B^T kron I) vec X
    let mut normal = SMatrix::<f64, 9, 9>::zeros();
    for p in pairs {
        let ra = p.robot.rotation.matrix();
        let rb = p.camera.rotation.matrix();
        let mut m = SMatrix::<f64, 9, 9>::zeros();
        for bc in 0..3 {
            for br in 0..3 {
                for r in 0..3 {
                    for c in 0..3 {
                        let kron_a = if br == bc { ra[(r, c)] } else { 0.0 };
                        let kron_b = if r == c { rb[(bc, br)] } else { 0.0 };
                        m[(br * 3 + r, bc * 3 + c)] = kron_a - kron_b;
                    }
                }
            }
        }
        normal += m.transpose() * m;
    }
    let eig = normal.symmetric_eigen();
    let imin = eig.eigenvalues.imin();
    let v = eig.eigenvectors.column(imin);
    let mut x = Matrix3::from_column_slice(v.as_slice());
    if x.determinant() < 0.0 {
        x = -x;
    }
    Rotation::from_matrix_exact(&nearest_rotation(&x))
}

fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    svd.solve(b, 1e-12)
        .map_err(|e| Error::DegenerateMotion(format!("least squares failed: {e}")))
}

/// Classical hand-eye solution for metric camera motions.
pub fn solve_rotation_translation(pairs: &MotionPairSet) -> Result<RigidTransform> {
    check_axis_diversity(pairs)?;
    let rx = solve_rotation(pairs);
    let n = pairs.len();
    let mut a = DMatrix::zeros(3 * n, 3);
    let mut b = DVector::zeros(3 * n);
    for (i, p) in pairs.iter().enumerate() {
        let ra = p.robot.rotation.matrix() - Matrix3::identity();
        let rhs = rx.rotate(&p.camera.translation) - p.robot.translation;
        a.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(&ra);
        b.fixed_rows_mut::<3>(3 * i).copy_from(&rhs);
    }
    let t = least_squares(&a, &b)?;
    Ok(RigidTransform::new(rx, Vector3::new(t[0], t[1], t[2])))
}

/// Hand-eye solution when camera translations are known only up to a
/// common factor: returns `(X, lambda)` with `A X = X B(lambda)`.
pub fn solve_with_scale(pairs: &MotionPairSet) -> Result<(RigidTransform, f64)> {
    check_axis_diversity(pairs)?;
    if pairs
        .iter()
        .all(|p| p.camera.translation.norm() <= MIN_CAMERA_TRANSLATION)
    {
        return Err(Error::ZeroCameraTranslation);
    }
    let rx = solve_rotation(pairs);
    let n = pairs.len();
    let mut a = DMatrix::zeros(3 * n, 4);
    let mut b = DVector::zeros(3 * n);
    for (i, p) in pairs.iter().enumerate() {
        let ra = p.robot.rotation.matrix() - Matrix3::identity();
        a.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(&ra);
        a.fixed_view_mut::<3, 1>(3 * i, 3)
            .copy_from(&(-rx.rotate(&p.camera.translation)));
        b.fixed_rows_mut::<3>(3 * i)
            .copy_from(&(-p.robot.translation));
    }
    let sol = least_squares(&a, &b)?;
    let lambda = sol[3];
    if lambda > 0.0 {
        return Ok((
            RigidTransform::new(rx, Vector3::new(sol[0], sol[1], sol[2])),
            lambda,
        ));
    }
    // a negative factor can only come from noise; refit t with |lambda|
    let lambda = lambda.abs().max(f64::MIN_POSITIVE);
    let mut b2 = DVector::zeros(3 * n);
    for (i, p) in pairs.iter().enumerate() {
        let rhs = rx.rotate(&p.camera.translation) * lambda - p.robot.translation;
        b2.fixed_rows_mut::<3>(3 * i).copy_from(&rhs);
    }
    let t = least_squares(&a.columns(0, 3).into_owned(), &b2)?;
    Ok((RigidTransform::new(rx, Vector3::new(t[0], t[1], t[2])), lambda))
}

/// Result of the single-axis solver.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarSolution {
    /// Translation component along `axis` is set to zero.
    pub x: RigidTransform,
    pub lambda: f64,
    /// Common robot rotation axis; the translation along it is unobservable.
    pub axis: Vector3<f64>,
}

/// Hand-eye solution for robot motions that all rotate about one axis
/// (ground vehicles). Rotation, scale and the in-plane translation are
/// recovered; the out-of-plane translation is left at zero.
pub fn solve_planar_with_scale(pairs: &MotionPairSet) -> Result<PlanarSolution> {
    if pairs.len() < 2 {
        return Err(Error::DegenerateMotion(format!(
            "need at least 2 motion pairs, got {}",
            pairs.len()
        )));
    }
    let robot: Vec<_> = pairs.iter().map(|p| p.robot).collect();
    let camera: Vec<_> = pairs.iter().map(|p| p.camera).collect();
    let obs_a = analyze_observability(&robot);
    let axis_a = obs_a.unobservable_axis.ok_or_else(|| {
        Error::DegenerateMotion("robot rotations do not share a single axis".into())
    })?;
    // camera axis from the same null-space test, with a looser threshold
    // since camera motions come from a noisy reconstruction
    let obs_b = analyze_observability(&camera);
    if obs_b.singular_values[1] <= OBSERVABILITY_THRESHOLD {
        return Err(Error::DegenerateMotion("camera motions are nearly pure translations".into()));
    }
    let mut axis_b = single_axis(&camera);
    let signed = |r: &Rotation, axis: &Vector3<f64>| r.log().dot(axis);
    let agreement: f64 = pairs
        .iter()
        .map(|p| signed(&p.robot.rotation, &axis_a) * signed(&p.camera.rotation, &axis_b))
        .sum();
    if agreement < 0.0 {
        axis_b = -axis_b;
    }
    let base = rotation_between(&axis_b, &axis_a);

    // in-plane basis
    let e1 = axis_a.cross(&if axis_a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() }).normalize();
    let e2 = axis_a.cross(&e1);
    let n = pairs.len();
    let mut a = DMatrix::zeros(2 * n, 4);
    let mut b = DVector::zeros(2 * n);
    for (i, p) in pairs.iter().enumerate() {
        let ra = p.robot.rotation.matrix() - Matrix3::identity();
        let w = base.rotate(&p.camera.translation);
        let w_perp = w - axis_a * axis_a.dot(&w);
        let w_rot = axis_a.cross(&w_perp);
        for (row, e) in [e1, e2].iter().enumerate() {
            let r = 2 * i + row;
            // t_X = u1 e1 + u2 e2
            a[(r, 0)] = e.dot(&(ra * e1));
            a[(r, 1)] = e.dot(&(ra * e2));
            a[(r, 2)] = -e.dot(&w_perp);
            a[(r, 3)] = -e.dot(&w_rot);
            b[r] = -e.dot(&p.robot.translation);
        }
    }
    let sol = least_squares(&a, &b)?;
    let (c, s) = (sol[2], sol[3]);
    let lambda = c.hypot(s);
    if lambda <= MIN_CAMERA_TRANSLATION {
        return Err(Error::ZeroCameraTranslation);
    }
    let phi = s.atan2(c);
    let rx = Rotation::from_axis_angle(&axis_a, phi) * base;
    Ok(PlanarSolution {
        x: RigidTransform::new(rx, e1 * sol[0] + e2 * sol[1]),
        lambda,
        axis: axis_a,
    })
}

/// Best common rotation axis of a set of motions.
fn single_axis(motions: &[RigidTransform]) -> Vector3<f64> {
    let mut gram = Matrix3::zeros();
    for m in motions {
        let r = m.rotation.matrix() - Matrix3::identity();
        gram += r.transpose() * r;
    }
    let eig = gram.symmetric_eigen();
    eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned()
}

/// Minimal rotation taking unit vector `from` onto unit vector `to`.
fn rotation_between(from: &Vector3<f64>, to: &Vector3<f64>) -> Rotation {
    let c = from.dot(to).clamp(-1.0, 1.0);
    let axis = from.cross(to);
    if axis.norm() < 1e-12 {
        if c > 0.0 {
            return Rotation::identity();
        }
        let ortho = from.cross(&if from.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() });
        return Rotation::from_axis_angle(&ortho, std::f64::consts::PI);
    }
    Rotation::from_axis_angle(&axis, c.acos())
}

/// `max_i ||A_i - X B_i(lambda) X^{-1}||_F`.
pub fn conjugation_residual(pairs: &MotionPairSet, x: &RigidTransform, lambda: f64) -> f64 {
    pairs
        .iter()
        .map(|p| {
            let b = RigidTransform::new(p.camera.rotation, p.camera.translation * lambda);
            (p.robot.to_matrix() - (*x * b * x.inverse()).to_matrix()).norm()
        })
        .fold(0.0, f64::max)
}

/// `sum_i ||A_i X - X B_i(lambda)||_F^2`.
pub fn squared_residual(pairs: &MotionPairSet, x: &RigidTransform, lambda: f64) -> f64 {
    let xm = x.to_matrix();
    pairs
        .iter()
        .map(|p| {
            let b = RigidTransform::new(p.camera.rotation, p.camera.translation * lambda);
            (p.robot.to_matrix() * xm - xm * b.to_matrix()).norm_squared()
        })
        .sum()
}
