use super::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{Mat3, Pose, Quat, Vec3};

/// Similarity `x ↦ s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Similarity {
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.scale * (self.rotation * x) + self.translation
    }

    pub fn apply_pose(&self, p: &Pose) -> Pose {
        let q = (Quat::from_rotation_matrix(&self.rotation) * p.q).normalized().unwrap_or(p.q);
        Pose { p: self.apply(&p.p), q }
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        let mut out = cloud.clone();
        out.landmarks.values_mut().for_each(|x| *x = self.apply(x));
        out.cameras.values_mut().for_each(|c| *c = self.apply_pose(c));
        out
    }
}

/// Least-squares similarity taking `src` onto `dst` (Umeyama).
pub fn umeyama(src: &[Vec3], dst: &[Vec3]) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch {
            expected: src.len(),
            got: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(Error::UnderConstrained("alignment needs three points".into()));
    }
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vec3>() / n;
    let md = dst.iter().sum::<Vec3>() / n;
    let var = src.iter().map(|s| (s - ms).norm_squared()).sum::<f64>() / n;
    if !(var > 1e-18) {
        return Err(Error::UnderConstrained("alignment points coincide".into()));
    }
    let mut cov = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - md) * (s - ms).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Mat3::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * vt;
    let d = svd.singular_values;
    let scale = (d[0] * sign[(0, 0)] + d[1] * sign[(1, 1)] + d[2] * sign[(2, 2)]) / var;
    Ok(Similarity {
        scale,
        rotation,
        translation: md - scale * (rotation * ms),
    })
}
