use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Quaternion stored as (w, x, y, z), Hamilton convention.
///
/// Unit quaternions built through [`Quat::normalized`] are canonicalized onto
/// the `w >= 0` hemisphere so that `q` and `-q` compare equal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(self, o: Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn scale(self, s: f64) -> Quat {
        Quat::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn conj(self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Flips the sign so that `w >= 0`; when `w == 0` the first non-zero
    /// vector component is made positive.
    pub fn canonical(self) -> Quat {
        let lead = [self.w, self.x, self.y, self.z]
            .into_iter()
            .find(|c| *c != 0.0)
            .unwrap_or(0.0);
        if lead < 0.0 {
            self.scale(-1.0)
        } else {
            self
        }
    }

    /// Unit-norm, canonical copy of `self`.
    pub fn normalized(self) -> Result<Quat> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateQuaternion);
        }
        // already unit to rounding: leave bits alone so re-normalization is idempotent
        if (self.dot(self) - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Ok(self.canonical());
        }
        Ok(self.scale(1.0 / n).canonical())
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Quat {
        let n = axis.norm();
        if n == 0.0 {
            return Quat::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, a.x * s, a.y * s, a.z * s)
    }

    /// Exponential map from a rotation vector (axis * angle, radians).
    pub fn exp(rv: Vector3<f64>) -> Quat {
        let theta = rv.norm();
        if theta < 1e-12 {
            // second-order accurate near the identity
            let q = Quat::new(1.0 - theta * theta / 8.0, 0.5 * rv.x, 0.5 * rv.y, 0.5 * rv.z);
            return q.scale(1.0 / q.norm());
        }
        let (s, c) = (0.5 * theta).sin_cos();
        let k = s / theta;
        Quat::new(c, rv.x * k, rv.y * k, rv.z * k)
    }

    /// Logarithm map to a rotation vector; the result has norm in `[0, pi]`.
    pub fn log(self) -> Vector3<f64> {
        let q = self.canonical();
        let v = q.vector();
        let vn = v.norm();
        if vn < 1e-12 {
            return v * (2.0 / q.w.max(f64::MIN_POSITIVE));
        }
        let angle = 2.0 * vn.atan2(q.w);
        v * (angle / vn)
    }

    /// Rotates `v` by this (unit) quaternion.
    pub fn rotate(self, v: Vector3<f64>) -> Vector3<f64> {
        self.to_rotation_matrix() * v
    }

    pub fn to_rotation_matrix(self) -> Matrix3<f64> {
        let Quat { w, x, y, z } = self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Shepperd's method; the result is canonical and unit-norm.
    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Quat {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quat::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quat::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.scale(1.0 / q.norm()).canonical()
    }

    /// Geodesic angle to `other` in radians, invariant to sign flips of either.
    pub fn angle_to(self, other: Quat) -> f64 {
        // atan2 of the relative rotation keeps full precision near zero
        let r = self.conj() * other;
        2.0 * r.vector().norm().atan2(r.w.abs())
    }

    /// Spherical interpolation towards `other` by fraction `t`.
    pub fn slerp(self, other: Quat, t: f64) -> Quat {
        let other = if self.dot(other) < 0.0 {
            other.scale(-1.0)
        } else {
            other
        };
        let delta = (self.conj() * other).log();
        (self * Quat::exp(delta * t)).canonical()
    }
}

impl Mul for Quat {
    type Output = Quat;

    fn mul(self, r: Quat) -> Quat {
        let l = self;
        Quat::new(
            l.w * r.w - l.x * r.x - l.y * r.y - l.z * r.z,
            l.w * r.x + l.x * r.w + l.y * r.z - l.z * r.y,
            l.w * r.y - l.x * r.z + l.y * r.w + l.z * r.x,
            l.w * r.z + l.x * r.y - l.y * r.x + l.z * r.w,
        )
    }
}

/// Normalizes `q` onto the unit sphere and the `w >= 0` hemisphere.
pub fn quat_normalize(q: [f64; 4]) -> Result<Quat> {
    Quat::from_array(q).normalized()
}

/// Skew-symmetric cross-product matrix `[v]x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_trivial_cases() {
        assert_eq!(quat_normalize([1.0, 0.0, 0.0, 0.0]).unwrap(), Quat::IDENTITY);
        assert_eq!(quat_normalize([2.0, 0.0, 0.0, 0.0]).unwrap(), Quat::IDENTITY);
        assert_eq!(quat_normalize([-3.0, 0.0, 0.0, 0.0]).unwrap(), Quat::IDENTITY);
        assert!(matches!(
            quat_normalize([0.0; 4]),
            Err(Error::DegenerateQuaternion)
        ));
    }

    #[test]
    fn exp_log_round_trip() {
        let rv = Vector3::new(0.3, -1.2, 0.7);
        let q = Quat::exp(rv);
        assert!((q.log() - rv).norm() < 1e-12);
        let tiny = Vector3::new(1e-14, 0.0, -2e-14);
        assert!((Quat::exp(tiny).log() - tiny).norm() < 1e-20);
    }

    #[test]
    fn slerp_endpoints() {
        let a = Quat::exp(Vector3::new(0.1, 0.2, 0.3));
        let b = Quat::exp(Vector3::new(-0.4, 0.0, 0.9));
        assert!(a.slerp(b, 0.0).angle_to(a) < 1e-7);
        assert!(a.slerp(b, 1.0).angle_to(b) < 1e-7);
        let mid = a.slerp(b, 0.5);
        assert!((mid.angle_to(a) - mid.angle_to(b)).abs() < 1e-9);
    }

    fn arb_quat() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-1.0f64..1.0).prop_filter("non-degenerate", |q| {
            q.iter().map(|x| x * x).sum::<f64>() > 1e-6
        })
    }

    proptest! {
        #[test]
        fn rotation_matrix_is_orthonormal(q in arb_quat()) {
            let r = quat_normalize(q).unwrap().to_rotation_matrix();
            let e = (r.transpose() * r - Matrix3::identity()).abs().max();
            prop_assert!(e < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn matrix_round_trip(q in arb_quat()) {
            let q = quat_normalize(q).unwrap();
            let back = Quat::from_rotation_matrix(&q.to_rotation_matrix());
            prop_assert!(back.angle_to(q) < 1e-7);
            prop_assert!(back.w >= 0.0);
        }

        #[test]
        fn product_matches_matrix_product(a in arb_quat(), b in arb_quat()) {
            let (a, b) = (quat_normalize(a).unwrap(), quat_normalize(b).unwrap());
            let lhs = (a * b).to_rotation_matrix();
            let rhs = a.to_rotation_matrix() * b.to_rotation_matrix();
            prop_assert!((lhs - rhs).abs().max() < 1e-12);
        }
    }
}
