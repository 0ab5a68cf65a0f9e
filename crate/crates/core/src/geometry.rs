//! Rotations and rigid transforms.
//!
//! Rotations are kept as 3x3 matrices because every Jacobian in the
//! registration code is written in matrix form. Poses are perturbed on the
//! right for rotation and additively (world frame) for translation:
//! `R' = R·exp(δθ)`, `t' = t + δt`, with the 6-vector ordered `[δθ; δt]`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::ops::Mul;

/// Below this angle `exp_so3` switches to its Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Max entry of `RᵀR − I` tolerated before a composed rotation is projected
/// back onto SO(3).
const ORTHONORMAL_DRIFT: f64 = 1e-12;

/// Cross-product matrix: `skew(v) * w == v.cross(&w)`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] for an antisymmetric matrix.
#[inline]
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues exponential map.
pub fn exp_so3(omega: &Vector3<f64>) -> Rotation {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(omega);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Matrix logarithm of a rotation, returning the rotation vector with
/// angle in `[0, π]`.
pub fn log_so3(rotation: &Rotation) -> Vector3<f64> {
    let r = &rotation.0;
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let axis_scaled = vee(&(r - r.transpose())) * 0.5; // sin(θ)·axis
    let sin_theta = axis_scaled.norm();
    let theta = sin_theta.atan2(cos_theta);

    if theta < 1e-6 {
        // θ/sin θ ≈ 1 + θ²/6
        return axis_scaled * (1.0 + theta * theta / 6.0);
    }
    if std::f64::consts::PI - theta > 1e-4 {
        return axis_scaled * (theta / sin_theta);
    }

    // Near π the antisymmetric part vanishes; recover the axis from the
    // symmetric part (R + Rᵀ)/2 = cos θ·I + (1 − cos θ)·aaᵀ and fix its sign
    // with the remaining antisymmetric signal.
    let sym = (r + r.transpose()) * 0.5;
    let aat = (sym - Matrix3::identity() * cos_theta) / (1.0 - cos_theta);
    let diag = Vector3::new(aat[(0, 0)], aat[(1, 1)], aat[(2, 2)]);
    let mut axis = aat.column(diag.imax()).into_owned();
    axis.normalize_mut();
    if axis.dot(&axis_scaled) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Inverse of the right Jacobian of SO(3), `J_r⁻¹(φ)`.
///
/// `log(exp(φ)·exp(δ)) ≈ φ + J_r⁻¹(φ)·δ`.
pub fn right_jacobian_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let c = if theta2 < 1e-10 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + k * 0.5 + k * k * c
}

/// Left Jacobian of SO(3); maps a body twist's linear part into the
/// translation of `exp` on SE(3).
pub fn left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let (a, b) = if theta2 < 1e-10 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Element of SO(3) stored as an orthonormal matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix, projecting it onto SO(3) if it is not already
    /// orthonormal.
    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        let r = Rotation(m);
        if r.orthonormality_error() > ORTHONORMAL_DRIFT {
            r.orthonormalized()
        } else {
            r
        }
    }

    /// Wraps a matrix that the caller guarantees is a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Rotation(q.to_rotation_matrix().into_inner())
    }

    /// Builds a rotation from `(qx, qy, qz, qw)` as written in TUM files.
    pub fn from_xyzw(x: f64, y: f64, z: f64, w: f64) -> Self {
        Self::from_quaternion(&UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)))
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.0)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// `self · exp(δθ)`.
    pub fn retract(&self, delta: &Vector3<f64>) -> Self {
        *self * exp_so3(delta)
    }

    /// Largest absolute entry of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).amax()
    }

    /// Closest rotation in the Frobenius sense (polar decomposition).
    pub fn orthonormalized(&self) -> Self {
        let svd = self.0.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Rotation(r)
    }

    /// Geodesic distance in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        log_so3(&(self.inverse() * *other)).norm()
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        let m = Rotation(self.0 * rhs.0);
        if m.orthonormality_error() > ORTHONORMAL_DRIFT {
            m.orthonormalized()
        } else {
            m
        }
    }
}

/// Tangent-space increment `[δθ; δt]` (radians, meters).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Perturbation(pub Vector6<f64>);

impl Perturbation {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&rotation);
        v.fixed_rows_mut::<3>(3).copy_from(&translation);
        Perturbation(v)
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Rigid transform `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn identity() -> Self {
        Pose::default()
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose::new(Rotation::identity(), t)
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Pose::new(r_inv, -(r_inv.apply(&self.translation)))
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p + self.translation
    }

    /// Right-rotation / world-translation retraction.
    pub fn retract(&self, delta: &Perturbation) -> Self {
        Pose::new(
            self.rotation.retract(&delta.rotation()),
            self.translation + delta.translation(),
        )
    }

    /// Exponential of a constant body twist applied for unit time, composed on
    /// the right: `self · exp([ω; v])`.
    pub fn integrate_twist(&self, omega: &Vector3<f64>, velocity: &Vector3<f64>) -> Self {
        let step = Pose::new(exp_so3(omega), left_jacobian(omega) * velocity);
        *self * step
    }

    /// Linear interpolation in translation and geodesic in rotation.
    pub fn interpolate(&self, other: &Pose, alpha: f64) -> Pose {
        let dr = log_so3(&(self.rotation.inverse() * other.rotation));
        Pose::new(
            self.rotation.retract(&(dr * alpha)),
            self.translation + (other.translation - self.translation) * alpha,
        )
    }
}

/// Applies `T` to `p`.
pub fn apply_pose(pose: &Pose, p: &Vector3<f64>) -> Vector3<f64> {
    pose.apply(p)
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(self.rotation * rhs.rotation, self.apply(&rhs.translation))
    }
}
