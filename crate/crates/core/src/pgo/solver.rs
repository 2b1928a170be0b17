use nalgebra::{Matrix6, Vector3, Vector6};

use super::PgoWeights;
use crate::error::{Error, Result};
use crate::geometry::{relative_pose, Pose, Quat, RelativePose};

type V6 = Vector6<f64>;
type M6 = Matrix6<f64>;

const MAX_ITERATIONS: usize = 100;
const LAMBDA0: f64 = 1e-3;
const JAC_STEP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkResult {
    pub poses: Vec<Pose>,
    /// Cost before the first iteration followed by every accepted cost.
    pub costs: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn retract(x: &Pose, d: &V6) -> Pose {
    let q = x.q * Quat::exp(Vector3::new(d[3], d[4], d[5]));
    Pose {
        p: x.p + Vector3::new(d[0], d[1], d[2]),
        q: q.scale(1.0 / q.norm()).canonical(),
    }
}

fn rot_residual(measured: Quat, actual: Quat) -> Vector3<f64> {
    (measured.conj() * actual).log()
}

fn abs_residual(x: &Pose, a: &Pose, w: &PgoWeights) -> V6 {
    let dp = (x.p - a.p) * w.w_abs_p.sqrt();
    let dr = rot_residual(a.q, x.q) * w.w_abs_q.sqrt();
    V6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

fn rel_residual(xi: &Pose, xj: &Pose, m: &RelativePose, w: &PgoWeights) -> V6 {
    let r = relative_pose(xi, xj);
    let dp = (r.dp - m.dp) * w.w_rel_p.sqrt();
    let dr = rot_residual(m.dq, r.dq) * w.w_rel_q.sqrt();
    V6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

fn cost(xs: &[Pose], abs: &[Pose], rel: &[RelativePose], w: &PgoWeights) -> f64 {
    let a: f64 = xs.iter().zip(abs).map(|(x, a)| abs_residual(x, a, w).norm_squared()).sum();
    let r: f64 = rel
        .iter()
        .enumerate()
        .map(|(i, m)| rel_residual(&xs[i], &xs[i + 1], m, w).norm_squared())
        .sum();
    a + r
}

/// Central-difference Jacobian of `f` with respect to a tangent increment.
fn jacobian(x: &Pose, f: impl Fn(&Pose) -> V6) -> M6 {
    let mut j = M6::zeros();
    for k in 0..6 {
        let mut d = V6::zeros();
        d[k] = JAC_STEP;
        let col = (f(&retract(x, &d)) - f(&retract(x, &-d))) / (2.0 * JAC_STEP);
        j.set_column(k, &col);
    }
    j
}

/// Normal equations: diagonal blocks, super-diagonal blocks and gradient.
struct Normal {
    diag: Vec<M6>,
    upper: Vec<M6>,
    grad: Vec<V6>,
}

fn linearize(xs: &[Pose], abs: &[Pose], rel: &[RelativePose], w: &PgoWeights) -> Normal {
    let n = xs.len();
    let mut diag = vec![M6::zeros(); n];
    let mut upper = vec![M6::zeros(); n.saturating_sub(1)];
    let mut grad = vec![V6::zeros(); n];
    for i in 0..n {
        let r = abs_residual(&xs[i], &abs[i], w);
        let j = jacobian(&xs[i], |x| abs_residual(x, &abs[i], w));
        diag[i] += j.transpose() * j;
        grad[i] += j.transpose() * r;
    }
    for (i, m) in rel.iter().enumerate() {
        let r = rel_residual(&xs[i], &xs[i + 1], m, w);
        let ji = jacobian(&xs[i], |x| rel_residual(x, &xs[i + 1], m, w));
        let jj = jacobian(&xs[i + 1], |x| rel_residual(&xs[i], x, m, w));
        diag[i] += ji.transpose() * ji;
        diag[i + 1] += jj.transpose() * jj;
        upper[i] += ji.transpose() * jj;
        grad[i] += ji.transpose() * r;
        grad[i + 1] += jj.transpose() * r;
    }
    Normal { diag, upper, grad }
}

/// Solves the damped block-tridiagonal system `(H + λ diag H) δ = -g`.
fn solve(nrm: &Normal, lambda: f64) -> Option<Vec<V6>> {
    let n = nrm.diag.len();
    let damped = |i: usize| {
        let d = &nrm.diag[i];
        let mut m = *d;
        for k in 0..6 {
            m[(k, k)] += lambda * d[(k, k)].max(1e-12);
        }
        m
    };
    let mut s_inv: Vec<M6> = Vec::with_capacity(n);
    let mut y: Vec<V6> = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = damped(i);
        let mut yi = -nrm.grad[i];
        if i > 0 {
            let ct = nrm.upper[i - 1].transpose();
            s -= ct * s_inv[i - 1] * nrm.upper[i - 1];
            yi -= ct * s_inv[i - 1] * y[i - 1];
        }
        let inv = s.cholesky()?.inverse();
        s_inv.push(inv);
        y.push(yi);
    }
    let mut x = vec![V6::zeros(); n];
    for i in (0..n).rev() {
        let rhs = if i + 1 < n { y[i] - nrm.upper[i] * x[i + 1] } else { y[i] };
        x[i] = s_inv[i] * rhs;
    }
    Some(x)
}

/// Levenberg-Marquardt over one chunk, starting from the absolute poses.
pub fn optimize_chunk(abs: &[Pose], rel: &[RelativePose], w: &PgoWeights) -> Result<ChunkResult> {
    w.validate()?;
    if abs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if rel.len() + 1 != abs.len() {
        return Err(Error::LengthMismatch {
            expected: abs.len() - 1,
            got: rel.len(),
        });
    }
    let mut xs = abs.to_vec();
    let mut c = cost(&xs, abs, rel, w);
    let mut costs = vec![c];
    let mut lambda = LAMBDA0;
    let mut converged = c < 1e-24;
    let mut iterations = 0;
    while !converged && iterations < MAX_ITERATIONS {
        iterations += 1;
        let nrm = linearize(&xs, abs, rel, w);
        let gmax = nrm.grad.iter().map(|g| g.amax()).fold(0.0, f64::max);
        if gmax < 1e-14 {
            converged = true;
            break;
        }
        loop {
            let Some(step) = solve(&nrm, lambda) else {
                lambda *= 10.0;
                if lambda > 1e12 {
                    break;
                }
                continue;
            };
            let cand: Vec<Pose> = xs.iter().zip(&step).map(|(x, d)| retract(x, d)).collect();
            let cc = cost(&cand, abs, rel, w);
            if cc <= c {
                let small = step.iter().map(|d| d.amax()).fold(0.0, f64::max) < 1e-12;
                converged = small || c - cc <= 1e-12 * c;
                xs = cand;
                c = cc;
                costs.push(c);
                lambda = (lambda / 10.0).max(1e-12);
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
        // no descent direction left at this precision
        converged |= lambda > 1e12;
    }
    if !c.is_finite() {
        return Err(Error::Diverged("pose graph cost is not finite".into()));
    }
    Ok(ChunkResult {
        poses: xs,
        costs,
        iterations,
        converged,
    })
}
