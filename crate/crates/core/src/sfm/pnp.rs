//! Camera pose from 2D-3D correspondences: three-point minimal solves inside
//! RANSAC, then Levenberg-Marquardt on the inliers.

use nalgebra::{Matrix4, Matrix6, Vector2, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::twoview::{pose_from_extrinsics, projection_jacobian};
use crate::error::{Error, Result};
use crate::geometry::{skew, Intrinsics, Mat3, Pose, Quat, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PnpParams {
    /// Inlier reprojection threshold in pixels.
    pub threshold_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for PnpParams {
    fn default() -> Self {
        PnpParams {
            threshold_px: 2.0,
            max_iterations: 1000,
            confidence: 0.999,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnpResult {
    pub pose: Pose,
    pub inliers: Vec<bool>,
}

/// Real roots of `c[0] x⁴ + c[1] x³ + c[2] x² + c[3] x + c[4]`.
fn quartic_roots(c: [f64; 5]) -> Vec<f64> {
    if c[0].abs() < 1e-14 * c.iter().map(|v| v.abs()).fold(0.0, f64::max) {
        return Vec::new();
    }
    let a: Vec<f64> = c.iter().map(|v| v / c[0]).collect();
    let comp = Matrix4::new(
        -a[1], -a[2], -a[3], -a[4], 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0,
    );
    let poly = |x: f64| (((x + a[1]) * x + a[2]) * x + a[3]) * x + a[4];
    let dpoly = |x: f64| ((4.0 * x + 3.0 * a[1]) * x + 2.0 * a[2]) * x + a[3];
    comp.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() < 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..5 {
                let d = dpoly(x);
                if d == 0.0 {
                    break;
                }
                x -= poly(x) / d;
            }
            x
        })
        .collect()
}

/// Rotation and translation with `dst ≈ R src + t` (least squares).
pub(crate) fn kabsch(src: &[Vec3], dst: &[Vec3]) -> Option<(Mat3, Vec3)> {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut h = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut dm = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        dm[(2, 2)] = -1.0;
    }
    let r = u * dm * vt;
    Some((r, cd - r * cs))
}

/// Grunert's three-point solution: up to four camera poses.
pub(crate) fn p3p(world: [Vec3; 3], rays: [Vec3; 3]) -> Vec<Pose> {
    let f: Vec<Vec3> = rays.iter().map(|r| r.normalize()).collect();
    let a2 = (world[1] - world[2]).norm_squared();
    let b2 = (world[0] - world[2]).norm_squared();
    let c2 = (world[0] - world[1]).norm_squared();
    if b2 < 1e-18 || a2 < 1e-18 || c2 < 1e-18 {
        return Vec::new();
    }
    let (ca, cb, cg) = (f[1].dot(&f[2]), f[0].dot(&f[2]), f[0].dot(&f[1]));
    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let coeffs = [
        (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca * ca,
        4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb),
        2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * (b2 - c2) / b2 * ca * ca - 4.0 * apc * ca * cb * cg
            + 2.0 * (b2 - a2) / b2 * cg * cg),
        4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg),
        (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg * cg,
    ];
    let mut out = Vec::new();
    for v in quartic_roots(coeffs) {
        let den = 2.0 * (cg - v * ca);
        if den.abs() < 1e-12 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / den;
        let d = 1.0 + v * v - 2.0 * v * cb;
        if !(d > 0.0) || u <= 0.0 || v <= 0.0 {
            continue;
        }
        let s1 = (b2 / d).sqrt();
        let cam = [f[0] * s1, f[1] * (u * s1), f[2] * (v * s1)];
        if let Some((r, t)) = kabsch(&world, &cam) {
            out.push(pose_from_extrinsics(&r, &t));
        }
    }
    out
}

fn reprojection(pose: &Pose, x: &Vec3, px: &Vector2<f64>, intr: &Intrinsics) -> Option<f64> {
    intr.project(&pose.world_to_camera(x)).map(|uv| (uv - px).norm())
}

/// Levenberg-Marquardt over the six pose parameters (translation, then a
/// right-multiplied rotation increment).
pub(crate) fn refine_pose(pose: Pose, pts: &[Vec3], px: &[Vector2<f64>], intr: &Intrinsics) -> Pose {
    let cost = |p: &Pose| -> f64 {
        pts.iter()
            .zip(px)
            .map(|(x, o)| match intr.project(&p.world_to_camera(x)) {
                Some(uv) => (uv - o).norm_squared(),
                None => f64::INFINITY,
            })
            .sum()
    };
    let mut cur = pose;
    let mut c = cost(&cur);
    let mut lambda = 1e-3;
    for _ in 0..100 {
        if c < 1e-24 {
            break;
        }
        let rt = cur.q.to_rotation_matrix().transpose();
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (x, o) in pts.iter().zip(px) {
            let xc = rt * (x - cur.p);
            if xc.z <= 1e-12 {
                continue;
            }
            let r = Vector2::new(intr.fx * xc.x / xc.z + intr.cx - o.x, intr.fy * xc.y / xc.z + intr.cy - o.y);
            let jpi = projection_jacobian(intr, &xc);
            let mut j = nalgebra::Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-jpi * rt));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jpi * skew(&xc)));
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let mut hd = h;
            for k in 0..6 {
                hd[(k, k)] += lambda * h[(k, k)].max(1e-12);
            }
            let Some(chol) = hd.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let d = chol.solve(&(-g));
            let cand = Pose {
                p: cur.p + Vec3::new(d[0], d[1], d[2]),
                q: (cur.q * Quat::exp(Vec3::new(d[3], d[4], d[5]))).normalized().unwrap_or(cur.q),
            };
            let cc = cost(&cand);
            if cc < c {
                let small = c - cc <= 1e-14 * c;
                cur = cand;
                c = cc;
                lambda = (lambda * 0.1).max(1e-15);
                accepted = !small;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    cur
}

/// Robust camera pose from world points and their pixels.
pub fn solve_pnp(pts: &[Vec3], px: &[Vector2<f64>], intr: &Intrinsics, params: &PnpParams) -> Result<PnpResult> {
    if pts.len() != px.len() {
        return Err(Error::LengthMismatch {
            expected: pts.len(),
            got: px.len(),
        });
    }
    let n = pts.len();
    if n < 4 {
        return Err(Error::LocalizationFailed(format!("{n} correspondences, need at least 4")));
    }
    if !(params.threshold_px > 0.0) {
        return Err(Error::invalid("inlier threshold must be positive"));
    }
    let rays: Vec<Vec3> = px.iter().map(|p| intr.unproject(p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let score = |pose: &Pose| -> (usize, f64) {
        let mut count = 0;
        let mut err = 0.0;
        for (x, o) in pts.iter().zip(px) {
            let e = reprojection(pose, x, o, intr).unwrap_or(f64::INFINITY);
            if e < params.threshold_px {
                count += 1;
                err += e;
            }
        }
        (count, err)
    };
    let mut best: Option<(Pose, usize, f64)> = None;
    let mut needed = params.max_iterations;
    let mut it = 0;
    while it < needed.min(params.max_iterations) {
        it += 1;
        let idx = sample(&mut rng, n, 3).into_vec();
        let world = [pts[idx[0]], pts[idx[1]], pts[idx[2]]];
        let r = [rays[idx[0]], rays[idx[1]], rays[idx[2]]];
        for pose in p3p(world, r) {
            let (c, e) = score(&pose);
            let better = match &best {
                None => true,
                Some((_, bc, be)) => c > *bc || (c == *bc && e < *be),
            };
            if better {
                best = Some((pose, c, e));
                let w = c as f64 / n as f64;
                if w >= 1.0 {
                    needed = 0;
                } else if w > 0.0 {
                    let k = (1.0 - params.confidence).ln() / (1.0 - w.powi(3)).ln();
                    needed = needed.min(k.ceil().max(1.0) as usize);
                }
            }
        }
    }
    let Some((mut pose, count, _)) = best else {
        return Err(Error::LocalizationFailed("no consensus".into()));
    };
    if count < 4 {
        return Err(Error::LocalizationFailed(format!("only {count} inliers")));
    }
    let inliers_of = |pose: &Pose| -> Vec<bool> {
        pts.iter()
            .zip(px)
            .map(|(x, o)| reprojection(pose, x, o, intr).is_some_and(|e| e < params.threshold_px))
            .collect()
    };
    for _ in 0..2 {
        let mask = inliers_of(&pose);
        let (ip, ix): (Vec<Vec3>, Vec<Vector2<f64>>) =
            pts.iter().zip(px).zip(&mask).filter(|(_, k)| **k).map(|((a, b), _)| (*a, *b)).unzip();
        if ip.len() < 4 {
            return Err(Error::LocalizationFailed(format!("only {} inliers after refinement", ip.len())));
        }
        pose = refine_pose(pose, &ip, &ix, intr);
    }
    let inliers = inliers_of(&pose);
    Ok(PnpResult { pose, inliers })
}
