//! Rigid-body transforms, rotations, tangent-space maps and the pinhole model.
//!
//! Poses follow the `T^A_B` convention: a transform maps points expressed in
//! frame `B` into frame `A`, and `a * b` applies `b` first.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};

/// Rotations closer than this to pi are rejected by [`Tangent6::log`].
pub const NEAR_PI_MARGIN: f64 = 1e-6;
/// Smallest depth accepted by [`project`].
pub const MIN_DEPTH: f64 = 1e-9;

/// 3D rotation stored as a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self(q)
    }

    /// Builds from raw (w, x, y, z) components, renormalizing them.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self(UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)))
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::from_rotation_vector(&(axis.normalize() * angle))
    }

    pub fn from_rotation_vector(omega: &Vector3<f64>) -> Self {
        Self(UnitQuaternion::from_scaled_axis(*omega))
    }

    pub fn rx(angle: f64) -> Self {
        Self::from_rotation_vector(&Vector3::new(angle, 0.0, 0.0))
    }

    pub fn ry(angle: f64) -> Self {
        Self::from_rotation_vector(&Vector3::new(0.0, angle, 0.0))
    }

    pub fn rz(angle: f64) -> Self {
        Self::from_rotation_vector(&Vector3::new(0.0, 0.0, angle))
    }

    /// Nearest rotation (in Frobenius norm) to an arbitrary 3x3 matrix.
    pub fn from_matrix_projected(m: &Matrix3<f64>) -> Self {
        Self::from_matrix_exact(&nearest_rotation(m))
    }

    /// Converts a matrix that is already orthonormal with det +1.
    pub fn from_matrix_exact(m: &Matrix3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
        Self(UnitQuaternion::from_rotation_matrix(&rot))
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    pub fn rotate(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.0 * p
    }

    /// Axis-angle vector with angle in [0, pi].
    pub fn log(&self) -> Vector3<f64> {
        let q = canonical(&self.0);
        let v = q.imag();
        let n = v.norm();
        if n < 1e-300 {
            return Vector3::zeros();
        }
        let angle = 2.0 * n.atan2(q.w);
        v * (angle / n)
    }

    pub fn angle(&self) -> f64 {
        let q = self.0.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }

    /// Renormalizes the stored quaternion after accumulated updates.
    pub fn renormalized(&self) -> Self {
        Self(UnitQuaternion::new_normalize(*self.0.quaternion()))
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

fn canonical(q: &UnitQuaternion<f64>) -> Quaternion<f64> {
    let q = *q.quaternion();
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

/// Angle of `r1^T r2` in [0, pi].
pub fn rotation_angle(r1: &Rotation, r2: &Rotation) -> f64 {
    (r1.inverse() * *r2).angle()
}

/// SVD projection onto SO(3).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rigid transform `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Self::new(r, Vector3::zeros())
    }

    /// `self` applied after `other`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let r_inv = self.rotation.inverse();
        RigidTransform {
            rotation: r_inv,
            translation: -r_inv.rotate(&self.translation),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Reads the upper 3x4 block; the rotation block is projected onto SO(3).
    pub fn from_matrix(m: &Matrix4<f64>) -> RigidTransform {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        RigidTransform::new(Rotation::from_matrix_projected(&r), t)
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = self.rotation.matrix();
        let t = self.translation;
        let mut out = [0.0; 12];
        for row in 0..3 {
            for col in 0..3 {
                out[row * 4 + col] = r[(row, col)];
            }
            out[row * 4 + 3] = t[row];
        }
        out
    }

    pub fn from_row_major_3x4(v: &[f64; 12]) -> RigidTransform {
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        RigidTransform::new(
            Rotation::from_matrix_projected(&r),
            Vector3::new(v[3], v[7], v[11]),
        )
    }

    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    /// Same rotation, translation multiplied by `lambda`.
    pub fn scaled(&self, lambda: f64) -> Result<RigidTransform> {
        scaled_motion(self, lambda)
    }

    /// Left-multiplies by `exp(delta)`.
    pub fn retract(&self, delta: &Tangent6) -> RigidTransform {
        let mut out = delta.exp().compose(self);
        out.rotation = out.rotation.renormalized();
        out
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl Mul<&RigidTransform> for &RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

/// Composition `a * b` (apply `b`, then `a`).
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// Rotation unchanged, translation multiplied by `lambda`.
pub fn scaled_motion(t: &RigidTransform, lambda: f64) -> Result<RigidTransform> {
    if !(lambda > 0.0) {
        return Err(Error::NonPositiveScale(lambda));
    }
    Ok(RigidTransform::new(t.rotation, t.translation * lambda))
}

/// Frobenius norm of the difference of two homogeneous matrices.
pub fn frobenius_distance(a: &RigidTransform, b: &RigidTransform) -> f64 {
    (a.to_matrix() - b.to_matrix()).norm()
}

/// Tangent vector `(omega, v)`: rotation vector first, translation part second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tangent6(pub Vector6<f64>);

impl Tangent6 {
    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self(Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z))
    }

    pub fn omega(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn v(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn exp(&self) -> RigidTransform {
        exp_map(self)
    }
}

/// Left Jacobian of SO(3), `V(omega)` in the SE(3) exponential.
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    let w2 = w * w;
    let (a, b) = if theta2 < 1e-10 {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + w * a + w2 * b
}

fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let w = skew(omega);
    let w2 = w * w;
    let c = if theta2 < 1e-10 {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let theta = theta2.sqrt();
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Matrix3::identity() - w * 0.5 + w2 * c
}

pub fn exp_map(x: &Tangent6) -> RigidTransform {
    let omega = x.omega();
    RigidTransform::new(
        Rotation::from_rotation_vector(&omega),
        so3_left_jacobian(&omega) * x.v(),
    )
}

pub fn log_map(t: &RigidTransform) -> Result<Tangent6> {
    let omega = t.rotation.log();
    let angle = omega.norm();
    if angle >= std::f64::consts::PI - NEAR_PI_MARGIN {
        return Err(Error::NearPiRotation(angle));
    }
    Ok(Tangent6::new(omega, so3_left_jacobian_inv(&omega) * t.translation))
}

/// 4x4 generator matrix of tangent coordinate `k` (0..3 rotation, 3..6 translation).
pub fn generator(k: usize) -> Matrix4<f64> {
    let mut g = Matrix4::zeros();
    match k {
        0 => {
            g[(1, 2)] = -1.0;
            g[(2, 1)] = 1.0;
        }
        1 => {
            g[(0, 2)] = 1.0;
            g[(2, 0)] = -1.0;
        }
        2 => {
            g[(0, 1)] = -1.0;
            g[(1, 0)] = 1.0;
        }
        3..=5 => g[(k - 3, 3)] = 1.0,
        _ => panic!("tangent index {k} out of range"),
    }
    g
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok_focal = self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite();
        let ok_pp = self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if !ok_focal || !ok_pp {
            return Err(Error::InvalidIntrinsics(format!("{self:?}")));
        }
        Ok(())
    }

    /// Normalized viewing ray `((u - cx)/fx, (v - cy)/fy, 1)`.
    pub fn ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    pub fn with_params(&self, p: [f64; 4]) -> Intrinsics {
        Intrinsics {
            fx: p[0],
            fy: p[1],
            cx: p[2],
            cy: p[3],
            ..*self
        }
    }
}

/// Projects a camera-frame point to pixels.
pub fn project(point: &Vector3<f64>, k: &Intrinsics) -> Result<Vector2<f64>> {
    if point.z <= MIN_DEPTH {
        return Err(Error::NonPositiveDepth(point.z));
    }
    Ok(Vector2::new(
        k.fx * point.x / point.z + k.cx,
        k.fy * point.y / point.z + k.cy,
    ))
}

/// Lifts a pixel with depth to the world frame: `pose * (sigma * depth * ray)`.
pub fn backproject(
    pixel: &Vector2<f64>,
    depth: f64,
    sigma: f64,
    k: &Intrinsics,
    pose: &RigidTransform,
) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth(depth));
    }
    if !(sigma > 0.0) {
        return Err(Error::NonPositiveScale(sigma));
    }
    Ok(pose.apply(&(k.ray(pixel) * (sigma * depth))))
}
