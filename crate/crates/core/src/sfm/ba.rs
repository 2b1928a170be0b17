//! Sparse bundle adjustment with a Schur-complement Levenberg-Marquardt step.
//!
//! Gauge: the first camera (lowest id) is frozen, and the coordinate of the
//! second camera along which it is farthest from the first is held fixed,
//! which pins the scale of that baseline.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix6, Matrix6x3, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::twoview::projection_jacobian;
use super::{FeatureTrack, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{skew, Intrinsics, Pose, Quat, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaStage {
    /// Landmarks and camera translations only.
    RotationsFixed,
    /// Camera rotations are refined as well.
    Final,
}

#[derive(Clone, Debug)]
pub struct BaResult {
    pub cloud: PointCloud,
    /// RMS pixel residual over the observations still in use.
    pub rms: f64,
    /// Cost at the start and after every accepted step; never increases.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Per track and observation: dropped by the residual-spread test, or
    /// unusable (unregistered camera, point behind the camera).
    pub excluded: Vec<Vec<bool>>,
}

const MAX_ITERATIONS: usize = 100;

struct Obs {
    cam: usize,
    pt: usize,
    px: Vector2<f64>,
    track: usize,
    k: usize,
}

struct Problem {
    intr: Intrinsics,
    cams: Vec<Pose>,
    cam_ids: Vec<usize>,
    pts: Vec<Vec3>,
    pt_ids: Vec<usize>,
    obs: Vec<Obs>,
    /// Free-parameter mask per camera: translation xyz, rotation xyz.
    free: Vec<[bool; 6]>,
    offset: Vec<usize>,
    n_free: usize,
}

fn residual(intr: &Intrinsics, cam: &Pose, x: &Vec3, px: &Vector2<f64>) -> Option<Vector2<f64>> {
    intr.project(&cam.world_to_camera(x)).map(|uv| uv - px)
}

impl Problem {
    fn cost(&self, cams: &[Pose], pts: &[Vec3], active: &[bool]) -> f64 {
        let mut c = 0.0;
        for (o, a) in self.obs.iter().zip(active) {
            if !*a {
                continue;
            }
            match residual(&self.intr, &cams[o.cam], &pts[o.pt], &o.px) {
                Some(r) => c += r.norm_squared(),
                None => return f64::INFINITY,
            }
        }
        c
    }

    /// Parameters after one damped Schur-complement step.
    fn step(&self, active: &[bool], lambda: f64) -> Result<(Vec<Pose>, Vec<Vec3>)> {
        let nc = self.cams.len();
        let np = self.pts.len();
        let mut hcc = vec![Matrix6::<f64>::zeros(); nc];
        let mut gc = vec![Vector6::<f64>::zeros(); nc];
        let mut hpp = vec![Matrix3::<f64>::zeros(); np];
        let mut gp = vec![Vector3::<f64>::zeros(); np];
        let mut hcp: Vec<Option<Matrix6x3<f64>>> = Vec::with_capacity(self.obs.len());
        let rts: Vec<Matrix3<f64>> = self.cams.iter().map(|c| c.q.to_rotation_matrix().transpose()).collect();
        for (o, a) in self.obs.iter().zip(active) {
            if !*a {
                hcp.push(None);
                continue;
            }
            let rt = &rts[o.cam];
            let xc = rt * (self.pts[o.pt] - self.cams[o.cam].p);
            let r = Vector2::new(
                self.intr.fx * xc.x / xc.z + self.intr.cx - o.px.x,
                self.intr.fy * xc.y / xc.z + self.intr.cy - o.px.y,
            );
            let jpi = projection_jacobian(&self.intr, &xc);
            let jx: Matrix2x3<f64> = jpi * rt;
            let mut jc = nalgebra::Matrix2x6::<f64>::zeros();
            jc.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-jx));
            jc.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jpi * skew(&xc)));
            for d in 0..6 {
                if !self.free[o.cam][d] {
                    jc.column_mut(d).fill(0.0);
                }
            }
            hcc[o.cam] += jc.transpose() * jc;
            gc[o.cam] += jc.transpose() * r;
            hpp[o.pt] += jx.transpose() * jx;
            gp[o.pt] += jx.transpose() * r;
            hcp.push(Some(jc.transpose() * jx));
        }
        let mut by_point: Vec<Vec<usize>> = vec![Vec::new(); np];
        for (i, o) in self.obs.iter().enumerate() {
            if active[i] {
                by_point[o.pt].push(i);
            }
        }
        let damped = |v: f64| v + lambda * v.max(1e-9);
        let mut hpp_inv = Vec::with_capacity(np);
        for h in hpp.iter_mut() {
            for k in 0..3 {
                h[(k, k)] = damped(h[(k, k)]);
            }
            hpp_inv.push(h.try_inverse().ok_or_else(|| Error::UnderConstrained("singular landmark block".into()))?);
        }

        let n = self.n_free;
        let mut s = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        let idx = |cam: usize| -> Vec<(usize, usize)> {
            let mut k = self.offset[cam];
            let mut out = Vec::new();
            for d in 0..6 {
                if self.free[cam][d] {
                    out.push((d, k));
                    k += 1;
                }
            }
            out
        };
        let cam_idx: Vec<Vec<(usize, usize)>> = (0..nc).map(idx).collect();
        for c in 0..nc {
            let mut h = hcc[c];
            for k in 0..6 {
                h[(k, k)] = damped(h[(k, k)]);
            }
            for &(d1, i1) in &cam_idx[c] {
                b[i1] -= gc[c][d1];
                for &(d2, i2) in &cam_idx[c] {
                    s[(i1, i2)] += h[(d1, d2)];
                }
            }
        }
        for (p, list) in by_point.iter().enumerate() {
            let inv = &hpp_inv[p];
            let w_g = inv * gp[p];
            for &o1 in list {
                let c1 = self.obs[o1].cam;
                let a = hcp[o1].as_ref().unwrap() * inv;
                let t = hcp[o1].as_ref().unwrap() * w_g;
                for &(d1, i1) in &cam_idx[c1] {
                    b[i1] += t[d1];
                }
                for &o2 in list {
                    let c2 = self.obs[o2].cam;
                    let blk = a * hcp[o2].as_ref().unwrap().transpose();
                    for &(d1, i1) in &cam_idx[c1] {
                        for &(d2, i2) in &cam_idx[c2] {
                            s[(i1, i2)] -= blk[(d1, d2)];
                        }
                    }
                }
            }
        }
        let dc = if n > 0 {
            s.cholesky()
                .ok_or_else(|| Error::UnderConstrained("reduced camera system is not positive definite".into()))?
                .solve(&b)
        } else {
            DVector::zeros(0)
        };
        let mut cams = self.cams.clone();
        let mut deltas = vec![Vector6::<f64>::zeros(); nc];
        for c in 0..nc {
            for &(d, i) in &cam_idx[c] {
                deltas[c][d] = dc[i];
            }
            let dl = &deltas[c];
            cams[c].p += Vec3::new(dl[0], dl[1], dl[2]);
            if self.free[c][3..].iter().any(|f| *f) {
                cams[c].q = (cams[c].q * Quat::exp(Vec3::new(dl[3], dl[4], dl[5]))).normalized()?;
            }
        }
        let mut pts = self.pts.clone();
        for (p, list) in by_point.iter().enumerate() {
            let mut rhs = -gp[p];
            for &o in list {
                rhs -= hcp[o].as_ref().unwrap().transpose() * deltas[self.obs[o].cam];
            }
            pts[p] += hpp_inv[p] * rhs;
        }
        Ok((cams, pts))
    }
}

/// LM until the relative decrease stalls, appending accepted costs to
/// `trace`; returns whether it converged.
fn solve(pb: &mut Problem, active: &[bool], trace: &mut Vec<f64>, iterations: &mut usize) -> Result<bool> {
    let mut cost = pb.cost(&pb.cams, &pb.pts, active);
    trace.push(cost);
    let mut lambda = 1e-3;
    while *iterations < MAX_ITERATIONS {
        if cost < 1e-24 {
            return Ok(true);
        }
        *iterations += 1;
        let (cams, pts) = pb.step(active, lambda)?;
        let c = pb.cost(&cams, &pts, active);
        if c < cost {
            let small = cost - c <= 1e-12 * cost;
            pb.cams = cams;
            pb.pts = pts;
            cost = c;
            trace.push(c);
            lambda = (lambda / 10.0).max(1e-12);
            if small {
                return Ok(true);
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Refines landmarks and cameras of `cloud` against the observations in
/// `tracks`.
///
/// After a first solve, observations whose residual norm exceeds `std` times
/// the RMS residual norm are dropped and the problem is solved again.
pub fn bundle_adjust(cloud: &PointCloud, tracks: &[FeatureTrack], stage: BaStage, std: f64) -> Result<BaResult> {
    if !(std > 0.0) {
        return Err(Error::invalid("std must be positive"));
    }
    if cloud.cameras.len() < 2 {
        return Err(Error::UnderConstrained("bundle adjustment needs two cameras".into()));
    }
    let cam_ids: Vec<usize> = cloud.cameras.keys().copied().collect();
    let cams: Vec<Pose> = cloud.cameras.values().copied().collect();
    let cam_index = |id: usize| cam_ids.binary_search(&id).ok();
    let mut pt_ids = Vec::new();
    let mut pts = Vec::new();
    let mut obs = Vec::new();
    let mut excluded: Vec<Vec<bool>> = tracks.iter().map(|t| vec![true; t.observations.len()]).collect();
    for (ti, t) in tracks.iter().enumerate() {
        let Some(x) = cloud.landmarks.get(&t.landmark) else { continue };
        let usable: Vec<(usize, usize)> = t
            .observations
            .iter()
            .enumerate()
            .filter_map(|(k, o)| {
                let c = cam_index(o.image)?;
                residual(&cloud.intrinsics, &cams[c], x, &o.px).map(|_| (k, c))
            })
            .collect();
        if usable.is_empty() {
            continue;
        }
        if usable.len() < 2 {
            return Err(Error::UnderConstrained(format!("landmark {} has one usable observation", t.landmark)));
        }
        let p = pts.len();
        pts.push(*x);
        pt_ids.push(t.landmark);
        for (k, c) in usable {
            excluded[ti][k] = false;
            obs.push(Obs {
                cam: c,
                pt: p,
                px: t.observations[k].px,
                track: ti,
                k,
            });
        }
    }

    let rot = stage == BaStage::Final;
    let base = cams[1].p - cams[0].p;
    if base.norm() < 1e-12 {
        return Err(Error::UnderConstrained("gauge cameras coincide".into()));
    }
    let fixed_axis = base.iamax();
    let mut free = Vec::with_capacity(cams.len());
    let mut offset = Vec::with_capacity(cams.len());
    let mut n_free = 0;
    for c in 0..cams.len() {
        let mut f = [c > 0, c > 0, c > 0, rot && c > 0, rot && c > 0, rot && c > 0];
        if c == 1 {
            f[fixed_axis] = false;
        }
        offset.push(n_free);
        n_free += f.iter().filter(|x| **x).count();
        free.push(f);
    }
    let need = if rot { 3 } else { 2 };
    for c in 1..cams.len() {
        let seen = obs.iter().filter(|o| o.cam == c).count();
        if seen < need {
            return Err(Error::UnderConstrained(format!("camera {} has {seen} observations", cam_ids[c])));
        }
    }

    let mut pb = Problem {
        intr: cloud.intrinsics,
        cams,
        cam_ids,
        pts,
        pt_ids,
        obs,
        free,
        offset,
        n_free,
    };
    let mut active = vec![true; pb.obs.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = solve(&mut pb, &active, &mut trace, &mut iterations)?;

    let norms: Vec<f64> = pb
        .obs
        .iter()
        .map(|o| residual(&pb.intr, &pb.cams[o.cam], &pb.pts[o.pt], &o.px).map_or(f64::INFINITY, |r| r.norm()))
        .collect();
    if !norms.is_empty() {
        let rms = (norms.iter().map(|e| e * e).sum::<f64>() / norms.len() as f64).sqrt();
        let limit = (std * rms).max(1e-6);
        let mut changed = false;
        for (a, e) in active.iter_mut().zip(&norms) {
            if *e > limit {
                *a = false;
                changed = true;
            }
        }
        if changed {
            // landmarks left with fewer than two observations are frozen
            let mut count = vec![0usize; pb.pts.len()];
            for (o, a) in pb.obs.iter().zip(&active) {
                count[o.pt] += *a as usize;
            }
            for (o, a) in pb.obs.iter().zip(active.iter_mut()) {
                if count[o.pt] < 2 {
                    *a = false;
                }
            }
            converged = solve(&mut pb, &active, &mut trace, &mut iterations)?;
        }
    }
    if !converged {
        log::warn!("bundle adjustment stopped after {MAX_ITERATIONS} iterations without converging");
    }

    let mut out = cloud.clone();
    for (id, c) in pb.cam_ids.iter().zip(&pb.cams) {
        out.cameras.insert(*id, *c);
    }
    for (id, x) in pb.pt_ids.iter().zip(&pb.pts) {
        out.landmarks.insert(*id, *x);
    }
    let mut sq = 0.0;
    let mut n = 0usize;
    for (o, a) in pb.obs.iter().zip(&active) {
        if *a {
            sq += residual(&pb.intr, &pb.cams[o.cam], &pb.pts[o.pt], &o.px).map_or(f64::INFINITY, |r| r.norm_squared());
            n += 1;
        } else {
            excluded[o.track][o.k] = true;
        }
    }
    Ok(BaResult {
        cloud: out,
        rms: if n > 0 { (sq / n as f64).sqrt() } else { 0.0 },
        cost_trace: trace,
        iterations,
        converged,
        excluded,
    })
}
