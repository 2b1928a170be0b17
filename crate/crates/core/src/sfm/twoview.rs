//! Essential-matrix initialization and triangulation.

use nalgebra::{DMatrix, Matrix3, Matrix4, SymmetricEigen, Vector2};
use rand::seq::index::sample;
use rand::Rng;

use crate::geometry::{Intrinsics, Mat3, Pose, Quat, Vec3};

fn smallest_eigvec(m: DMatrix<f64>) -> Vec<f64> {
    let e = SymmetricEigen::new(m);
    let k = e.eigenvalues.imin();
    e.eigenvectors.column(k).iter().copied().collect()
}

/// Linear eight-point estimate from normalized rays, projected onto the
/// essential manifold.
fn eight_point(xa: &[Vec3], xb: &[Vec3], idx: &[usize]) -> Option<Mat3> {
    let mut ata = DMatrix::<f64>::zeros(9, 9);
    for &k in idx {
        let (a, b) = (xa[k], xb[k]);
        let row: Vec<f64> = (0..3).flat_map(|i| (0..3).map(move |j| b[i] * a[j])).collect();
        for r in 0..9 {
            for c in 0..9 {
                ata[(r, c)] += row[r] * row[c];
            }
        }
    }
    let v = smallest_eigvec(ata);
    let e = Matrix3::from_row_slice(&v);
    let svd = e.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let s = 0.5 * (svd.singular_values[0] + svd.singular_values[1]);
    if !(s > 0.0) {
        return None;
    }
    Some(u * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, 0.0)) * vt)
}

fn sampson(e: &Mat3, a: &Vec3, b: &Vec3) -> f64 {
    let ea = e * a;
    let etb = e.transpose() * b;
    let num = b.dot(&ea);
    let den = ea.x * ea.x + ea.y * ea.y + etb.x * etb.x + etb.y * etb.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num * num / den
}

/// RANSAC over eight-point samples; `thresh` is a Sampson distance in
/// normalized image units. Returns the refit matrix and its inlier mask.
pub(crate) fn essential_ransac(xa: &[Vec3], xb: &[Vec3], thresh: f64, iterations: usize, rng: &mut impl Rng) -> Option<(Mat3, Vec<bool>)> {
    let n = xa.len();
    if n < 8 {
        return None;
    }
    let t2 = thresh * thresh;
    let inliers_of = |e: &Mat3| -> Vec<bool> { (0..n).map(|k| sampson(e, &xa[k], &xb[k]) < t2).collect() };
    let all: Vec<usize> = (0..n).collect();
    let mut best: Option<(usize, Mat3)> = eight_point(xa, xb, &all).map(|e| (inliers_of(&e).iter().filter(|b| **b).count(), e));
    if best.as_ref().map(|b| b.0) != Some(n) {
        for _ in 0..iterations {
            let idx = sample(rng, n, 8).into_vec();
            let Some(e) = eight_point(xa, xb, &idx) else { continue };
            let c = inliers_of(&e).iter().filter(|b| **b).count();
            if best.as_ref().is_none_or(|b| c > b.0) {
                best = Some((c, e));
            }
        }
    }
    let (_, e) = best?;
    let mask = inliers_of(&e);
    let idx: Vec<usize> = (0..n).filter(|k| mask[*k]).collect();
    if idx.len() < 8 {
        return None;
    }
    let e = eight_point(xa, xb, &idx)?;
    let mask = inliers_of(&e);
    Some((e, mask))
}

/// Camera pose from world-to-camera rotation and translation.
pub(crate) fn pose_from_extrinsics(r: &Mat3, t: &Vec3) -> Pose {
    Pose {
        p: -(r.transpose() * t),
        q: Quat::from_rotation_matrix(&r.transpose()),
    }
}

/// Pose of camera B with camera A at the origin, choosing among the four
/// decompositions by the number of points in front of both cameras.
pub(crate) fn relative_from_essential(e: &Mat3, xa: &[Vec3], xb: &[Vec3], mask: &[bool]) -> Option<(Pose, usize)> {
    let svd = e.svd(true, true);
    let mut u = svd.u?;
    let mut vt = svd.v_t?;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t: Vec3 = u.column(2).into();
    let a = Pose::IDENTITY;
    let mut best: Option<(Pose, usize)> = None;
    for r in [u * w * vt, u * w.transpose() * vt] {
        for tt in [t, -t] {
            let b = pose_from_extrinsics(&r, &tt);
            let front = (0..xa.len())
                .filter(|k| mask[*k])
                .filter(|k| {
                    triangulate(&[a, b], &[xa[*k], xb[*k]])
                        .map(|x| a.world_to_camera(&x).z > 0.0 && b.world_to_camera(&x).z > 0.0)
                        .unwrap_or(false)
                })
                .count();
            if best.as_ref().is_none_or(|bb| front > bb.1) {
                best = Some((b, front));
            }
        }
    }
    best
}

/// Linear multi-view triangulation from normalized rays `(x, y, 1)`.
pub(crate) fn triangulate(poses: &[Pose], rays: &[Vec3]) -> Option<Vec3> {
    if poses.len() < 2 {
        return None;
    }
    let mut ata = Matrix4::<f64>::zeros();
    for (pose, ray) in poses.iter().zip(rays) {
        let rcw = pose.q.to_rotation_matrix().transpose();
        let tcw = -(rcw * pose.p);
        let row = |k: usize| nalgebra::RowVector4::new(rcw[(k, 0)], rcw[(k, 1)], rcw[(k, 2)], tcw[k]);
        let (p1, p2, p3) = (row(0), row(1), row(2));
        for eq in [p3 * ray.x - p1, p3 * ray.y - p2] {
            ata += eq.transpose() * eq;
        }
    }
    let e = SymmetricEigen::new(ata);
    let v = e.eigenvectors.column(e.eigenvalues.imin());
    if v[3].abs() < 1e-12 {
        return None;
    }
    let x = Vec3::new(v[0] / v[3], v[1] / v[3], v[2] / v[3]);
    x.iter().all(|c| c.is_finite()).then_some(x)
}

/// Gauss-Newton refinement of one landmark against fixed cameras.
pub(crate) fn refine_point(poses: &[Pose], px: &[Vector2<f64>], intr: &Intrinsics, x0: Vec3) -> Vec3 {
    let mut x = x0;
    let mut lambda = 1e-6;
    let cost = |x: &Vec3| -> f64 {
        poses
            .iter()
            .zip(px)
            .map(|(p, o)| match intr.project(&p.world_to_camera(x)) {
                Some(uv) => (uv - o).norm_squared(),
                None => f64::INFINITY,
            })
            .sum()
    };
    let mut c = cost(&x);
    for _ in 0..20 {
        let mut h = Mat3::zeros();
        let mut g = Vec3::zeros();
        for (p, o) in poses.iter().zip(px) {
            let rt = p.q.to_rotation_matrix().transpose();
            let xc = rt * (x - p.p);
            if xc.z <= 1e-12 {
                continue;
            }
            let r = Vector2::new(intr.fx * xc.x / xc.z + intr.cx - o.x, intr.fy * xc.y / xc.z + intr.cy - o.y);
            let jp = projection_jacobian(intr, &xc) * rt;
            h += jp.transpose() * jp;
            g += jp.transpose() * r;
        }
        let mut accepted = false;
        while lambda < 1e8 {
            let mut hd = h;
            for k in 0..3 {
                hd[(k, k)] += lambda * h[(k, k)].max(1e-12);
            }
            let Some(inv) = hd.try_inverse() else { break };
            let cand = x - inv * g;
            let cc = cost(&cand);
            if cc < c {
                x = cand;
                let done = c - cc <= 1e-15 * c.max(1e-300);
                c = cc;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = !done;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    x
}

/// `∂π/∂x_c` of the pinhole projection at camera-frame point `xc`.
pub(crate) fn projection_jacobian(intr: &Intrinsics, xc: &Vec3) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / xc.z;
    nalgebra::Matrix2x3::new(
        intr.fx * iz,
        0.0,
        -intr.fx * xc.x * iz * iz,
        0.0,
        intr.fy * iz,
        -intr.fy * xc.y * iz * iz,
    )
}
