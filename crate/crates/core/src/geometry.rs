//! Rigid-body algebra on SE(3) and the task-frame canonicalization.
//!
//! Quaternions are stored with `w >= 0` so that two equal rotations always
//! have identical coefficients. Serialized poses use the fixed row order
//! `[tx, ty, tz, qw, qx, qy, qz]`.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Rigid transform: unit quaternion rotation followed by a translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

/// Spatial velocity: linear (m/s) and angular (rad/s) parts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        Self { linear, angular }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            linear: Vector3::new(v[0], v[1], v[2]),
            angular: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.linear
            .iter()
            .chain(self.angular.iter())
            .all(|v| v.is_finite())
    }
}

fn canonical_sign(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from raw quaternion coefficients `(w, x, y, z)`; the
    /// quaternion is normalized and flipped to `w >= 0`.
    pub fn new(w: f64, x: f64, y: f64, z: f64, translation: Vector3<f64>) -> Self {
        Self::from_parts(
            UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)),
            translation,
        )
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonical_sign(rotation),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::from_parts(UnitQuaternion::identity(), translation)
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::from_parts(rotation, Vector3::zeros())
    }

    /// Planar pose: translation plus a rotation about world z.
    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self::from_parts(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            Vector3::new(x, y, z),
        )
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Quaternion coefficients in `(w, x, y, z)` order.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        let rotation = UnitQuaternion::new_normalize((self.rotation * other.rotation).into_inner());
        Pose::from_parts(
            rotation,
            self.translation + self.rotation * other.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::from_parts(inv, -(inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `[tx, ty, tz, qw, qx, qy, qz]`
    pub fn to_array(&self) -> [f64; 7] {
        let [w, x, y, z] = self.quaternion_wxyz();
        [
            self.translation.x,
            self.translation.y,
            self.translation.z,
            w,
            x,
            y,
            z,
        ]
    }

    pub fn from_array(a: &[f64; 7]) -> Pose {
        Pose::new(a[3], a[4], a[5], a[6], Vector3::new(a[0], a[1], a[2]))
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Position distance and rotation angle between two poses.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        (
            (self.translation - other.translation).norm(),
            self.rotation.angle_to(&other.rotation),
        )
    }
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let a = <[f64; 7]>::deserialize(deserializer)?;
        let norm = (a[3] * a[3] + a[4] * a[4] + a[5] * a[5] + a[6] * a[6]).sqrt();
        if !(norm > 1e-12) || !a.iter().all(|v| v.is_finite()) {
            return Err(serde::de::Error::custom(
                "pose quaternion must be finite and non-zero",
            ));
        }
        Ok(Pose::from_array(&a))
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(p: &Pose) -> Pose {
    p.inverse()
}

/// SO(3) logarithm as an axis-angle vector with angle in `[0, pi]`.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = canonical_sign(*q);
    let v = q.imag();
    let s = v.norm();
    if s < 1e-12 {
        // first-order expansion of 2 * atan2(s, w) / s
        return v * (2.0 / q.w);
    }
    let angle = 2.0 * s.atan2(q.w);
    v * (angle / s)
}

pub fn so3_exp(v: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*v)
}

/// Inverse of the right Jacobian of SO(3) at `phi`.
pub fn so3_right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = phi.cross_matrix();
    if theta < 1e-6 {
        return Matrix3::identity() + 0.5 * k + (1.0 / 12.0) * k * k;
    }
    let coeff = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + coeff * k * k
}

/// Converts a rotation matrix to a quaternion by Shepperd's method: the
/// branch is chosen from the largest diagonal element, which keeps the
/// axis well-defined for rotations of exactly pi.
pub fn quaternion_from_matrix(m: &Matrix3<f64>) -> UnitQuaternion<f64> {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let (w, x, y, z);
    if trace >= m[(0, 0)] && trace >= m[(1, 1)] && trace >= m[(2, 2)] {
        let s = (1.0 + trace).sqrt() * 2.0;
        w = 0.25 * s;
        x = (m[(2, 1)] - m[(1, 2)]) / s;
        y = (m[(0, 2)] - m[(2, 0)]) / s;
        z = (m[(1, 0)] - m[(0, 1)]) / s;
    } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        w = (m[(2, 1)] - m[(1, 2)]) / s;
        x = 0.25 * s;
        y = (m[(0, 1)] + m[(1, 0)]) / s;
        z = (m[(0, 2)] + m[(2, 0)]) / s;
    } else if m[(1, 1)] >= m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        w = (m[(0, 2)] - m[(2, 0)]) / s;
        x = (m[(0, 1)] + m[(1, 0)]) / s;
        y = 0.25 * s;
        z = (m[(1, 2)] + m[(2, 1)]) / s;
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        w = (m[(1, 0)] - m[(0, 1)]) / s;
        x = (m[(0, 2)] + m[(2, 0)]) / s;
        y = (m[(1, 2)] + m[(2, 1)]) / s;
        z = 0.25 * s;
    }
    canonical_sign(UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)))
}

/// Task-space error `target - actual`: position difference followed by the
/// rotation logarithm of `target.rotation * actual.rotation^-1`, both in the
/// world frame.
pub fn pose_error(target: &Pose, actual: &Pose) -> Vector6<f64> {
    let dp = target.translation - actual.translation;
    let dr = so3_log(&(target.rotation * actual.rotation.inverse()));
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

/// Expresses `t_world` in the reference frame `t_ref`: `t_ref^-1 * t_world`.
pub fn canonicalize(t_ref: &Pose, t_world: &Pose) -> Pose {
    t_ref.inverse().compose(t_world)
}

/// Maps a canonical pose back to the world: `t_ref * t_canonical`.
pub fn decanonicalize(t_ref: &Pose, t_canonical: &Pose) -> Pose {
    t_ref.compose(t_canonical)
}

/// ZYX Euler angles `(roll, pitch, yaw)` with `R = Rz(yaw) Ry(pitch) Rx(roll)`.
pub fn rotation_from_euler(euler: &Vector3<f64>) -> UnitQuaternion<f64> {
    canonical_sign(UnitQuaternion::from_euler_angles(euler.x, euler.y, euler.z))
}

pub fn euler_from_rotation(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let (roll, pitch, yaw) = q.euler_angles();
    Vector3::new(roll, pitch, yaw)
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn sign_convention_is_enforced() {
        let p = Pose::new(-1.0, 0.0, 0.0, 0.0, Vector3::zeros());
        assert_eq!(p.quaternion_wxyz(), [1.0, 0.0, 0.0, 0.0]);
        let q = Pose::new(-0.5, 0.5, 0.5, 0.5, Vector3::zeros());
        assert!(q.quaternion_wxyz()[0] >= 0.0);
    }

    #[test]
    fn identity_and_inverse_cases() {
        let p = Pose::new(0.3, 0.1, -0.7, 0.2, Vector3::new(1.0, -2.0, 0.5));
        let id = Pose::identity();
        let a = id.compose(&p);
        assert!((a.translation() - p.translation()).norm() < 1e-15);
        let b = p.compose(&p.inverse());
        let (dp, da) = b.distance(&id);
        assert!(dp < 1e-12 && da < 1e-9);
        assert_eq!(id.inverse(), id);
    }

    #[test]
    fn inverse_of_pure_translation() {
        let p = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let inv = p.inverse();
        assert_eq!(*inv.translation(), Vector3::new(-1.0, -2.0, -3.0));
        assert_eq!(inv.quaternion_wxyz(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pose_error_of_yaw_offset() {
        let target = Pose::from_xyz_yaw(0.0, 0.0, 0.0, FRAC_PI_2);
        let e = pose_error(&target, &Pose::identity());
        let expected = Vector6::new(0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2);
        assert!((e - expected).norm() < 1e-12);
        assert_eq!(pose_error(&target, &target), Vector6::zeros());
    }

    #[test]
    fn canonicalize_simple_cases() {
        let p = Pose::new(0.2, 0.4, 0.1, -0.3, Vector3::new(0.3, 0.2, 0.1));
        let c = canonicalize(&p, &p);
        let (dp, da) = c.distance(&Pose::identity());
        assert!(dp < 1e-12 && da < 1e-9);

        let r = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let w = Pose::from_translation(Vector3::new(3.0, 0.0, 0.0));
        assert_eq!(
            *canonicalize(&r, &w).translation(),
            Vector3::new(2.0, 0.0, 0.0)
        );
        assert_eq!(decanonicalize(&r, &Pose::identity()), r);
    }

    #[test]
    fn log_at_pi_and_matrix_branch() {
        let q = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), PI);
        let v = so3_log(&q);
        assert!((v.norm() - PI).abs() < 1e-12);
        assert!((v.normalize().y.abs() - 1.0).abs() < 1e-12);

        for axis in [Vector3::x_axis(), Vector3::y_axis(), Vector3::z_axis()] {
            let m = UnitQuaternion::from_axis_angle(&axis, PI)
                .to_rotation_matrix()
                .into_inner();
            let back = quaternion_from_matrix(&m);
            let m2 = back.to_rotation_matrix().into_inner();
            assert!((m - m2).norm() < 1e-12);
        }
    }

    #[test]
    fn euler_round_trip() {
        let e = Vector3::new(0.1, -0.2, 2.9);
        let q = rotation_from_euler(&e);
        assert!((euler_from_rotation(&q) - e).norm() < 1e-12);
    }

    #[test]
    fn right_jacobian_inverse_matches_finite_difference() {
        let phi = Vector3::new(0.4, -0.9, 0.3);
        let jr_inv = so3_right_jacobian_inv(&phi);
        let h = 1e-6;
        // log(exp(phi) exp(d)) ~ phi + Jr^-1 d
        for i in 0..3 {
            let mut d = Vector3::zeros();
            d[i] = h;
            let plus = so3_log(&(so3_exp(&phi) * so3_exp(&d)));
            let minus = so3_log(&(so3_exp(&phi) * so3_exp(&-d)));
            let col = (plus - minus) / (2.0 * h);
            assert!((col - jr_inv.column(i)).norm() < 1e-7);
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-15);
    }
}
