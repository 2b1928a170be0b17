//! Pose algebra, frame transforms and trajectory error metrics.
//!
//! Orientations are camera-to-world unit quaternions stored `(w, x, y, z)`;
//! positions are camera centers in world coordinates, in meters.

mod metrics;
mod quat;
pub mod stream;

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};

use crate::error::{Error, Result};

pub use metrics::{
    improvement_percent, median, median_orientation_error, median_position_error,
    orientation_error_deg,
};
pub use quat::{quat_normalize, skew, Quat};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Absolute pose: camera center `p` and camera-to-world orientation `q`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub p: Vec3,
    pub q: Quat,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        p: Vector3::new(0.0, 0.0, 0.0),
        q: Quat::IDENTITY,
    };

    /// Builds a pose, normalizing and canonicalizing the quaternion.
    pub fn new(p: Vec3, q: Quat) -> Result<Self> {
        Ok(Self { p, q: q.normalized()? })
    }

    pub fn rotation(&self) -> RotationMatrix {
        RotationMatrix::from_quat(self.q)
    }

    /// 4x4 homogeneous camera-to-world transform.
    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut t = Matrix4::identity();
        t.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.q.to_rotation_matrix());
        t.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.p);
        t
    }

    /// World point expressed in this camera's frame.
    pub fn world_to_camera(&self, x: &Vec3) -> Vec3 {
        self.q.to_rotation_matrix().transpose() * (x - self.p)
    }

    /// The 7-vector `[px, py, pz, qw, qx, qy, qz]`.
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.p.x, self.p.y, self.p.z, self.q.w, self.q.x, self.q.y, self.q.z,
        ]
    }
}

/// Pose delta between consecutive timesteps, with the translation expressed in
/// the earlier frame.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RelativePose {
    pub dp: Vec3,
    pub dq: Quat,
}

impl RelativePose {
    pub const IDENTITY: RelativePose = RelativePose {
        dp: Vector3::new(0.0, 0.0, 0.0),
        dq: Quat::IDENTITY,
    };

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.dp.x, self.dp.y, self.dp.z, self.dq.w, self.dq.x, self.dq.y, self.dq.z,
        ]
    }
}

/// Proper rotation matrix (`RᵀR = I`, `det R = 1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix(pub Mat3);

impl RotationMatrix {
    pub fn from_quat(q: Quat) -> Self {
        Self(q.to_rotation_matrix())
    }

    pub fn to_quat(&self) -> Quat {
        Quat::from_rotation_matrix(&self.0)
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Largest deviation from orthonormality and unit determinant.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.0.transpose() * self.0 - Mat3::identity()).abs().max();
        e.max((self.0.determinant() - 1.0).abs())
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Intrinsics {
    /// Checkerboard calibration of the reference camera setup.
    fn default() -> Self {
        Self {
            fx: 548.449_348_18,
            fy: 540.176_005_12,
            cx: 317.737_626_48,
            cy: 249.006_142_24,
        }
    }
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Projects a camera-frame point; `None` when it is not in front.
    pub fn project(&self, xc: &Vec3) -> Option<Vector2<f64>> {
        if xc.z <= 1e-12 {
            return None;
        }
        Some(Vector2::new(
            self.fx * xc.x / xc.z + self.cx,
            self.fy * xc.y / xc.z + self.cy,
        ))
    }

    /// Unit-depth ray `(x, y, 1)` through pixel `uv`.
    pub fn unproject(&self, uv: &Vector2<f64>) -> Vec3 {
        Vector3::new((uv.x - self.cx) / self.fx, (uv.y - self.cy) / self.fy, 1.0)
    }

    /// Intrinsics of the same camera resampled by `factor` (0.25 = quarter
    /// resolution), using the pixel-center convention.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: (self.cx + 0.5) * factor - 0.5,
            cy: (self.cy + 0.5) * factor - 0.5,
        }
    }
}

/// Relative pose taking `a` to `b`: `dp = Rₐᵀ (b.p − a.p)`, `dq = conj(qₐ) ⊗ q_b`.
pub fn relative_pose(a: &Pose, b: &Pose) -> RelativePose {
    let dp = a.q.to_rotation_matrix().transpose() * (b.p - a.p);
    let dq = (a.q.conj() * b.q).canonical();
    let dq = dq.scale(1.0 / dq.norm());
    RelativePose { dp, dq }
}

/// Applies `rel` to `a`; inverse of [`relative_pose`].
pub fn compose(a: &Pose, rel: &RelativePose) -> Pose {
    let p = a.p + a.q.to_rotation_matrix() * rel.dp;
    let q = (a.q * rel.dq).canonical();
    Pose {
        p,
        q: q.scale(1.0 / q.norm()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let p = Vec3::new(
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
            rng.random_range(-5.0..5.0),
        );
        let q = Quat::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Pose::new(p, q).unwrap()
    }

    /// Double-double accumulation of Σqᵢ², then a Newton-corrected sqrt.
    fn extended_norm(q: [f64; 4]) -> f64 {
        let (mut hi, mut lo) = (0.0f64, 0.0f64);
        for x in q {
            let p = x * x;
            let perr = x.mul_add(x, -p);
            let s = hi + p;
            let bb = s - hi;
            let serr = (hi - (s - bb)) + (p - bb);
            hi = s;
            lo += serr + perr;
        }
        let total = hi + lo;
        let r = total.sqrt();
        r + (total - r * r) / (2.0 * r)
    }

    #[test]
    fn normalize_matches_extended_precision_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let n = extended_norm(q);
            let got = quat_normalize(q).unwrap();
            let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
            for (g, x) in got.to_array().iter().zip(q) {
                assert!((g - sign * x / n).abs() < 1e-15);
            }
            assert!((got.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn relative_pose_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_pose(&mut rng);
        let r = relative_pose(&a, &a);
        assert!(r.dp.norm() < 1e-12);
        assert!(r.dq.angle_to(Quat::IDENTITY) < 1e-7);

        let b = Pose::new(Vec3::new(1.0, 2.0, 3.0), Quat::IDENTITY).unwrap();
        let r = relative_pose(&Pose::IDENTITY, &b);
        assert_eq!(r.dp, Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(r.dq, Quat::IDENTITY);
    }

    #[test]
    fn compose_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_pose(&mut rng);
        let c = compose(&a, &RelativePose::IDENTITY);
        assert!((c.p - a.p).norm() < 1e-12 && c.q.angle_to(a.q) < 1e-7);
        let rel = RelativePose {
            dp: Vec3::new(1.0, 0.0, 0.0),
            dq: Quat::IDENTITY,
        };
        assert_eq!(compose(&Pose::IDENTITY, &rel).p, Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn relative_pose_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            let t = a.to_homogeneous().try_inverse().unwrap() * b.to_homogeneous();
            let r = relative_pose(&a, &b);
            let oracle_p = Vec3::new(t[(0, 3)], t[(1, 3)], t[(2, 3)]);
            assert!((r.dp - oracle_p).norm() < 1e-9);
            let oracle_r = t.fixed_view::<3, 3>(0, 0).into_owned();
            assert!((r.dq.to_rotation_matrix() - oracle_r).abs().max() < 1e-9);

            let c = compose(&a, &r);
            let tc = a.to_homogeneous() * {
                let mut m = Matrix4::identity();
                m.fixed_view_mut::<3, 3>(0, 0)
                    .copy_from(&r.dq.to_rotation_matrix());
                m.fixed_view_mut::<3, 1>(0, 3).copy_from(&r.dp);
                m
            };
            assert!((c.to_homogeneous() - tc).abs().max() < 1e-9);
        }
    }

    #[test]
    fn compose_round_trip_ten_thousand() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            let r = relative_pose(&a, &b);
            let c = compose(&a, &r);
            assert!((c.p - b.p).norm() < 1e-9);
            assert!((c.q.to_array().iter().zip(b.q.to_array()))
                .all(|(x, y)| (x - y).abs() < 1e-9));
            let r2 = relative_pose(&a, &c);
            assert!((r2.dp - r.dp).norm() < 1e-9);
            assert!((r2.dq.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_axis_and_intrinsics_validation() {
        let k = Intrinsics::default();
        let uv = k.project(&Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((uv.x, uv.y), (k.cx, k.cy));
        assert!(k.project(&Vec3::zeros()).is_none());
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        let ray = k.unproject(&Vector2::new(100.0, 50.0));
        let back = k.project(&(ray * 7.0)).unwrap();
        assert!((back - Vector2::new(100.0, 50.0)).norm() < 1e-12);
    }
}
