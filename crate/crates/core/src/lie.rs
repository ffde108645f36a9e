//! SO(3) / SE(3) group operations.
//!
//! Rotations are stored as unit quaternions with the double cover folded so
//! that `w >= 0`. When `w` is zero up to rounding (angle pi) the sign is fixed so that the
//! largest-magnitude vector component is positive; that component is the axis
//! with the largest diagonal entry of the rotation matrix, so `so3_log` of a
//! half-turn about `+z` or `-z` both return `(0, 0, pi)`.
//!
//! Perturbations are right-multiplicative: `R <- R * Exp(delta)`.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotation vector (Lie algebra element of SO(3)), radians.
pub type AxisAngle = Vector3<f64>;

const EXP_LOG_SMALL_ANGLE: f64 = 1e-6;
const JR_INV_SMALL_ANGLE: f64 = 1e-4;
const SLERP_LINEAR_DOT: f64 = 1.0 - 1e-9;

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct Rotation {
    q: UnitQuaternion<f64>,
}

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [w, x, y, z] = self.wxyz();
        write!(f, "Rotation(w: {w:.6}, x: {x:.6}, y: {y:.6}, z: {z:.6})")
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl From<Rotation> for [f64; 4] {
    fn from(r: Rotation) -> Self {
        r.wxyz()
    }
}

impl From<[f64; 4]> for Rotation {
    fn from(c: [f64; 4]) -> Self {
        Rotation::from_wxyz(c[0], c[1], c[2], c[3])
    }
}

fn canonical(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    // already-unit input is left untouched so normalisation is idempotent
    let n = q.norm();
    let mut q = if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
        q
    } else {
        q / n
    };
    let flip = if q.w.abs() > 4.0 * f64::EPSILON {
        q.w < 0.0
    } else {
        // half-turn (up to rounding): make the dominant axis component positive
        let v = [q.i, q.j, q.k];
        let mut best = 0;
        for k in 1..3 {
            if v[k].abs() > v[best].abs() {
                best = k;
            }
        }
        v[best] < 0.0
    };
    if flip {
        q = -q;
    }
    UnitQuaternion::new_unchecked(q)
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            q: UnitQuaternion::identity(),
        }
    }

    /// Builds a rotation from (possibly unnormalized) quaternion coefficients.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self {
            q: canonical(Quaternion::new(w, x, y, z)),
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self {
            q: canonical(q.into_inner()),
        }
    }

    /// Converts an orthonormal matrix, picking the numerically largest of
    /// `w, x, y, z` first (largest diagonal / trace).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let tr = m.trace();
        let (d0, d1, d2) = (m[(0, 0)], m[(1, 1)], m[(2, 2)]);
        let q = if tr >= d0 && tr >= d1 && tr >= d2 {
            let s = (1.0 + tr).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if d0 >= d1 && d0 >= d2 {
            let s = (1.0 + d0 - d1 - d2).sqrt() * 2.0;
            Quaternion::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if d1 >= d2 {
            let s = (1.0 + d1 - d0 - d2).sqrt() * 2.0;
            Quaternion::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + d2 - d0 - d1).sqrt() * 2.0;
            Quaternion::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        Self { q: canonical(q) }
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.q.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.q
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.q.to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Self {
        Self::from_quaternion(self.q.inverse())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.q * v
    }

    /// Geodesic angle to `other`, radians in `[0, pi]`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        so3_log(&(self.inverse() * *other)).norm()
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation::from_quaternion(self.q * rhs.q)
    }
}

pub fn so3_exp(omega: &AxisAngle) -> Result<Rotation> {
    if !omega.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("so3_exp"));
    }
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (w, k) = if theta < EXP_LOG_SMALL_ANGLE {
        (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    Ok(Rotation::from_wxyz(w, k * omega.x, k * omega.y, k * omega.z))
}

/// Principal rotation vector, `|omega| <= pi`.
pub fn so3_log(r: &Rotation) -> AxisAngle {
    let [w, x, y, z] = r.wxyz();
    let v = Vector3::new(x, y, z);
    let n2 = v.norm_squared();
    let n = n2.sqrt();
    // w >= 0 after canonicalisation, so theta = 2 atan2(n, w) lies in [0, pi].
    let scale = if n < 0.5 * EXP_LOG_SMALL_ANGLE {
        2.0 / w * (1.0 - n2 / (3.0 * w * w))
    } else {
        2.0 * n.atan2(w) / n
    };
    v * scale
}

/// Inverse of the SO(3) right Jacobian.
pub fn so3_right_jacobian_inv(omega: &AxisAngle) -> Result<Matrix3<f64>> {
    if !omega.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("so3_right_jacobian_inv"));
    }
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    if theta >= PI {
        return Err(Error::InjectivityRadius { angle: theta });
    }
    let w = hat(omega);
    let w2 = w * w;
    let coeff = if theta < JR_INV_SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Ok(Matrix3::identity() + 0.5 * w + coeff * w2)
}

/// Constant-angular-velocity interpolation along the shorter arc.
pub fn quat_slerp(q0: &Rotation, q1: &Rotation, t: f64) -> Result<Rotation> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::FractionOutOfRange(t));
    }
    let a = q0.q.quaternion().coords;
    let mut b = q1.q.quaternion().coords;
    let mut dot = a.dot(&b);
    if dot < 0.0 {
        b = -b;
        dot = -dot;
    }
    let c = if dot > SLERP_LINEAR_DOT {
        a * (1.0 - t) + b * t
    } else {
        let theta = dot.min(1.0).acos();
        let s = theta.sin();
        a * (((1.0 - t) * theta).sin() / s) + b * ((t * theta).sin() / s)
    };
    Ok(Rotation::from_wxyz(c[3], c[0], c[1], c[2]))
}

/// Rigid transform. For camera poses the convention throughout the crate is
/// world <- camera (the pose maps camera-frame points into the world).
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct SE3Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
}

impl SE3Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
            timestamp: None,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn with_timestamp(mut self, t: f64) -> Self {
        self.timestamp = Some(t);
        self
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Right-perturbed copy: rotation `R * Exp(d_rot)`, translation `p + d_trans`.
    pub fn retract(&self, d_rot: &Vector3<f64>, d_trans: &Vector3<f64>) -> Result<Self> {
        Ok(Self {
            rotation: self.rotation * so3_exp(d_rot)?,
            translation: self.translation + d_trans,
            timestamp: self.timestamp,
        })
    }
}

/// `a * b`; the result keeps `a`'s timestamp.
pub fn se3_compose(a: &SE3Pose, b: &SE3Pose) -> SE3Pose {
    SE3Pose {
        rotation: a.rotation * b.rotation,
        translation: a.translation + a.rotation.rotate(&b.translation),
        timestamp: a.timestamp,
    }
}

pub fn se3_inverse(a: &SE3Pose) -> SE3Pose {
    let r_inv = a.rotation.inverse();
    SE3Pose {
        translation: -r_inv.rotate(&a.translation),
        rotation: r_inv,
        timestamp: a.timestamp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_axis(rng: &mut impl Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                return v / n;
            }
        }
    }

    fn max_abs(m: &Matrix3<f64>) -> f64 {
        m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let r = so3_exp(&Vector3::zeros()).unwrap();
        assert_eq!(r.wxyz(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn quarter_turn_about_z_maps_x_to_y() {
        let r = so3_exp(&Vector3::new(0.0, 0.0, PI / 2.0)).unwrap();
        let y = r.rotate(&Vector3::x());
        assert!((y - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn exp_rejects_non_finite() {
        assert!(so3_exp(&Vector3::new(f64::NAN, 0.0, 0.0)).is_err());
        assert!(so3_exp(&Vector3::new(0.0, f64::INFINITY, 0.0)).is_err());
    }

    #[test]
    fn exp_log_round_trip_norm_03() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let w = random_axis(&mut rng) * 0.3;
            let back = so3_log(&so3_exp(&w).unwrap());
            assert!((back - w).norm() < 1e-10);
        }
    }

    #[test]
    fn log_of_identity_is_zero() {
        assert_eq!(so3_log(&Rotation::identity()), Vector3::zeros());
    }

    #[test]
    fn log_of_half_turn_uses_positive_dominant_axis() {
        let r = so3_exp(&Vector3::new(0.0, 0.0, PI)).unwrap();
        let w = so3_log(&r);
        assert!((w - Vector3::new(0.0, 0.0, PI)).norm() < 1e-12);
        let r = so3_exp(&Vector3::new(0.0, 0.0, -PI)).unwrap();
        let w = so3_log(&r);
        assert!((w - Vector3::new(0.0, 0.0, PI)).norm() < 1e-12);
        // same convention when built from a matrix
        let m = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        let w = so3_log(&Rotation::from_matrix(&m));
        assert!((w - Vector3::new(0.0, 0.0, PI)).norm() < 1e-12);
    }

    #[test]
    fn log_round_trip_sweep_1000() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let angle = rng.random_range(1e-3..PI - 1e-3);
            let w = random_axis(&mut rng) * angle;
            let back = so3_log(&so3_exp(&w).unwrap());
            worst = worst.max((back - w).norm());
        }
        assert!(worst < 1e-9, "worst {worst}");
    }

    #[test]
    fn exp_log_branches_agree_at_threshold() {
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        let below = axis * (EXP_LOG_SMALL_ANGLE * (1.0 - 1e-9));
        let above = axis * (EXP_LOG_SMALL_ANGLE * (1.0 + 1e-9));
        let a = so3_exp(&below).unwrap().wxyz();
        let b = so3_exp(&above).unwrap().wxyz();
        for k in 0..4 {
            assert!((a[k] - b[k]).abs() < 1e-9);
        }
        assert!((so3_log(&so3_exp(&below).unwrap()) - below).norm() < 1e-15);
    }

    #[test]
    fn matrix_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let w = random_axis(&mut rng) * rng.random_range(0.0..PI);
            let r = so3_exp(&w).unwrap();
            let back = Rotation::from_matrix(&r.matrix());
            assert!(r.angle_to(&back) < 1e-12);
        }
    }

    #[test]
    fn jr_inv_at_zero_is_identity() {
        assert_eq!(
            so3_right_jacobian_inv(&Vector3::zeros()).unwrap(),
            Matrix3::identity()
        );
    }

    /// d/d(delta) Log(Exp(w) Exp(delta)) at delta = 0, central differences.
    fn jr_inv_fd(w: &Vector3<f64>, h: f64) -> Matrix3<f64> {
        let base = so3_exp(w).unwrap();
        let mut m = Matrix3::zeros();
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = h;
            let plus = so3_log(&(base * so3_exp(&d).unwrap()));
            let minus = so3_log(&(base * so3_exp(&-d).unwrap()));
            m.set_column(k, &((plus - minus) / (2.0 * h)));
        }
        m
    }

    #[test]
    fn jr_inv_matches_finite_differences() {
        let w = Vector3::new(0.0, 0.0, 0.5);
        let err = max_abs(&(so3_right_jacobian_inv(&w).unwrap() - jr_inv_fd(&w, 1e-6)));
        assert!(err < 1e-6, "err {err}");

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let w = random_axis(&mut rng) * rng.random_range(0.0..2.5);
            let a = so3_right_jacobian_inv(&w).unwrap();
            let n = jr_inv_fd(&w, 1e-6);
            let rel = max_abs(&(a - n)) / max_abs(&n);
            assert!(rel < 1e-5, "rel {rel} at {w:?}");
        }
    }

    #[test]
    fn jr_inv_branches_agree_at_threshold() {
        let axis = Vector3::new(-0.2, 0.9, 0.4).normalize();
        let a = so3_right_jacobian_inv(&(axis * (JR_INV_SMALL_ANGLE * (1.0 - 1e-9)))).unwrap();
        let b = so3_right_jacobian_inv(&(axis * (JR_INV_SMALL_ANGLE * (1.0 + 1e-9)))).unwrap();
        assert!(max_abs(&(a - b)) < 1e-10);
    }

    #[test]
    fn jr_inv_rejects_angle_pi() {
        assert!(matches!(
            so3_right_jacobian_inv(&Vector3::new(PI, 0.0, 0.0)),
            Err(Error::InjectivityRadius { .. })
        ));
    }

    #[test]
    fn slerp_endpoints_and_midpoint() {
        let q0 = Rotation::identity();
        let q1 = so3_exp(&Vector3::new(0.0, 0.0, PI / 2.0)).unwrap();
        assert_eq!(quat_slerp(&q0, &q1, 0.0).unwrap(), q0);
        assert!(quat_slerp(&q0, &q1, 1.0).unwrap().angle_to(&q1) < 1e-15);
        let mid = quat_slerp(&q0, &q1, 0.5).unwrap();
        let expect = so3_exp(&Vector3::new(0.0, 0.0, PI / 4.0)).unwrap();
        assert!(mid.angle_to(&expect) < 1e-12);
    }

    #[test]
    fn slerp_rejects_fraction_outside_unit_interval() {
        let q = Rotation::identity();
        assert!(quat_slerp(&q, &q, -0.1).is_err());
        assert!(quat_slerp(&q, &q, 1.5).is_err());
    }

    #[test]
    fn slerp_proportional_angle_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let q0 = so3_exp(&(random_axis(&mut rng) * rng.random_range(0.0..3.0))).unwrap();
            let q1 = so3_exp(&(random_axis(&mut rng) * rng.random_range(0.0..3.0))).unwrap();
            let total = q0.angle_to(&q1);
            if total < 1e-3 {
                continue;
            }
            let r = quat_slerp(&q0, &q1, 0.25).unwrap();
            assert!((q0.angle_to(&r) / total - 0.25).abs() < 1e-9);
            let n = r.quaternion().quaternion().norm();
            assert!((n - 1.0).abs() < 1e-12);
            let s = quat_slerp(&q1, &q0, 0.75).unwrap();
            assert!(r.angle_to(&s) < 1e-12);
        }
    }

    #[test]
    fn se3_group_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let random_pose = |rng: &mut ChaCha8Rng| {
            SE3Pose::new(
                so3_exp(&(random_axis(rng) * rng.random_range(0.0..3.0))).unwrap(),
                Vector3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                ),
            )
        };
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            let ai = se3_compose(&a, &SE3Pose::identity());
            assert!(ai.rotation.angle_to(&a.rotation) < 1e-15);
            assert!((ai.translation - a.translation).norm() < 1e-15);

            let e = se3_compose(&se3_inverse(&a), &a);
            assert!(so3_log(&e.rotation).norm() < 1e-10);
            assert!(e.translation.norm() < 1e-10);

            let l = se3_compose(&se3_compose(&a, &b), &c);
            let r = se3_compose(&a, &se3_compose(&b, &c));
            assert!(l.rotation.angle_to(&r.rotation) < 1e-9);
            assert!((l.translation - r.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn rotation_is_unit_and_canonical() {
        let r = Rotation::from_wxyz(-2.0, 0.5, 0.1, 0.0);
        let [w, x, y, z] = r.wxyz();
        assert!(w >= 0.0);
        assert!(((w * w + x * x + y * y + z * z) - 1.0).abs() < 1e-12);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
            (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
        }

        proptest! {
            #[test]
            fn log_inverts_exp(w in vec3(1.8).prop_filter("inside pi", |w| w.norm() < PI - 1e-3)) {
                let back = so3_log(&so3_exp(&w).unwrap());
                prop_assert!((back - w).norm() < 1e-10);
            }

            #[test]
            fn compose_then_inverse_is_identity(r in vec3(3.0), t in vec3(10.0), p in vec3(5.0)) {
                let a = SE3Pose::new(so3_exp(&r).unwrap(), t);
                let id = se3_compose(&a, &se3_inverse(&a));
                prop_assert!(id.translation.norm() < 1e-12);
                prop_assert!(id.rotation.angle_to(&Rotation::identity()) < 1e-7);
                let q = se3_inverse(&a).transform_point(&a.transform_point(&p));
                prop_assert!((q - p).norm() < 1e-10);
            }

            #[test]
            fn slerp_hits_its_endpoints(a in vec3(1.5), b in vec3(1.5)) {
                let (qa, qb) = (so3_exp(&a).unwrap(), so3_exp(&b).unwrap());
                prop_assert!(quat_slerp(&qa, &qb, 0.0).unwrap().angle_to(&qa) < 1e-7);
                prop_assert!(quat_slerp(&qa, &qb, 1.0).unwrap().angle_to(&qb) < 1e-7);
            }
        }
    }
}
