use nalgebra::Vector2;

use super::SceneSpec;
use crate::error::{Error, Result};
use crate::flow::{FlowField, Image};
use crate::geometry::{Intrinsics, Pose, Vec3};
use crate::par;

/// Distance along `dir` from `origin` (inside the box) to the box surface.
fn exit_distance(spec: &SceneSpec, origin: &Vec3, dir: &Vec3) -> Option<f64> {
    let (lo, hi) = (spec.lo(), spec.hi());
    let mut t = f64::INFINITY;
    for k in 0..3 {
        if dir[k] > 1e-12 {
            t = t.min((hi[k] - origin[k]) / dir[k]);
        } else if dir[k] < -1e-12 {
            t = t.min((lo[k] - origin[k]) / dir[k]);
        }
    }
    (t.is_finite() && t > 0.0).then_some(t)
}

fn surface_point(spec: &SceneSpec, pose: &Pose, intr: &Intrinsics, x: usize, y: usize) -> Option<Vec3> {
    let ray = pose.q.rotate(intr.unproject(&Vector2::new(x as f64, y as f64)));
    exit_distance(spec, &pose.p, &ray).map(|t| pose.p + ray * t)
}

fn check_inside(spec: &SceneSpec, pose: &Pose) -> Result<()> {
    let (lo, hi) = (spec.lo(), spec.hi());
    if (0..3).any(|k| pose.p[k] <= lo[k] || pose.p[k] >= hi[k]) {
        return Err(Error::invalid("camera must be strictly inside the scene box"));
    }
    Ok(())
}

/// Analytic flow from `a` to `b` against the box walls, floor and ceiling.
///
/// Pixels whose surface point falls behind `b` or outside its frame are
/// clamped to the frame border and marked low-confidence.
pub fn synth_flow(
    spec: &SceneSpec,
    a: &Pose,
    b: &Pose,
    intr: &Intrinsics,
    width: usize,
    height: usize,
) -> Result<FlowField> {
    spec.validate()?;
    intr.validate()?;
    check_inside(spec, a)?;
    check_inside(spec, b)?;
    if a == b {
        return Ok(FlowField::zeros(width, height));
    }
    let mut cells = vec![(0.0, 0.0, false); width * height];
    par::for_each_row(&mut cells, width, |y, row| {
        for (x, c) in row.iter_mut().enumerate() {
            let Some(pt) = surface_point(spec, a, intr, x, y) else {
                *c = (0.0, 0.0, true);
                continue;
            };
            match intr.project(&b.world_to_camera(&pt)) {
                Some(uv) => {
                    let cu = uv.x.clamp(0.0, (width - 1) as f64);
                    let cv = uv.y.clamp(0.0, (height - 1) as f64);
                    *c = (cu - x as f64, cv - y as f64, cu != uv.x || cv != uv.y);
                }
                None => *c = (0.0, 0.0, true),
            }
        }
    });
    let mut f = FlowField::zeros(width, height);
    for (i, (u, v, low)) in cells.into_iter().enumerate() {
        f.u[i] = u;
        f.v[i] = v;
        f.low_confidence[i] = low;
    }
    Ok(f)
}

/// Smooth solid texture in `[0, 1]`, seeded, evaluated at a world point.
pub fn texture_at(seed: u64, x: &Vec3) -> f64 {
    const WAVES: usize = 16;
    let mut s = 0.0;
    let mut state = seed ^ 0x243f_6a88_85a3_08d3;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..WAVES {
        let wavelength = 0.08 * 6f64.powf(next());
        let theta = std::f64::consts::PI * next();
        let phi = std::f64::consts::TAU * next();
        let phase = std::f64::consts::TAU * next();
        let dir = Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
        s += (std::f64::consts::TAU / wavelength * dir.dot(x) + phase).sin();
    }
    0.5 + 0.5 * (1.5 * s / (WAVES as f64).sqrt()).tanh()
}

/// Grayscale render of the textured box seen from `pose`.
pub fn render(
    spec: &SceneSpec,
    pose: &Pose,
    intr: &Intrinsics,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<Image> {
    spec.validate()?;
    check_inside(spec, pose)?;
    Image::from_fn(width, height, |x, y| {
        surface_point(spec, pose, intr, x, y).map_or(0.0, |pt| texture_at(seed, &pt))
    })
}
