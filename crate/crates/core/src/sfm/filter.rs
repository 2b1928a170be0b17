use std::collections::BTreeSet;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, Vec3};

/// Keeps matches whose neighborhood agrees across both images.
///
/// The neighbors of a match are the other matches within `sc` pixels of it
/// in image A. It survives when more than half of those neighbors also lie
/// within `sc` pixels of it in image B. Isolated matches have nothing to
/// disagree with and are kept. `sc = 0` disables the filter.
pub fn spatial_consistency_filter(matches: &[(Vector2<f64>, Vector2<f64>)], sc: f64) -> Vec<(Vector2<f64>, Vector2<f64>)> {
    if sc <= 0.0 {
        return matches.to_vec();
    }
    let r2 = sc * sc;
    matches
        .iter()
        .enumerate()
        .filter(|(i, (a, b))| {
            let mut near = 0usize;
            let mut agree = 0usize;
            for (j, (a2, b2)) in matches.iter().enumerate() {
                if j == *i || (a2 - a).norm_squared() > r2 {
                    continue;
                }
                near += 1;
                if (b2 - b).norm_squared() <= r2 {
                    agree += 1;
                }
            }
            near == 0 || 2 * agree > near
        })
        .map(|(_, m)| *m)
        .collect()
}

/// Regular grid of points on the floor plane `z = height`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloorGrid {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub step: f64,
    pub height: f64,
}

impl FloorGrid {
    pub fn points(&self) -> Result<Vec<Vec3>> {
        if !(self.step > 0.0) || self.max[0] < self.min[0] || self.max[1] < self.min[1] {
            return Err(Error::invalid("floor grid needs a positive step and min <= max"));
        }
        let nx = ((self.max[0] - self.min[0]) / self.step).floor() as usize + 1;
        let ny = ((self.max[1] - self.min[1]) / self.step).floor() as usize + 1;
        let mut out = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                out.push(Vec3::new(
                    self.min[0] + i as f64 * self.step,
                    self.min[1] + j as f64 * self.step,
                    self.height,
                ));
            }
        }
        Ok(out)
    }
}

fn visible(pose: &Pose, intr: &Intrinsics, size: (usize, usize), pts: &[Vec3]) -> BTreeSet<usize> {
    let (w, h) = (size.0 as f64, size.1 as f64);
    pts.iter()
        .enumerate()
        .filter_map(|(i, x)| {
            let uv = intr.project(&pose.world_to_camera(x))?;
            (uv.x >= 0.0 && uv.x < w && uv.y >= 0.0 && uv.y < h).then_some(i)
        })
        .collect()
}

/// Fraction of floor-grid points seen by both cameras, relative to the camera
/// that sees more of them; zero when neither sees any.
pub fn overlap_fraction(a: &Pose, b: &Pose, intr: &Intrinsics, size: (usize, usize), grid: &FloorGrid) -> Result<f64> {
    let pts = grid.points()?;
    let va = visible(a, intr, size, &pts);
    let vb = visible(b, intr, size, &pts);
    let denom = va.len().max(vb.len());
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(va.intersection(&vb).count() as f64 / denom as f64)
}

/// Image pairs `(i, j)`, `i < j`, sharing at least `oc` percent of their
/// visible floor-grid points; `oc = 0` admits every pair.
pub fn overlap_criterion(
    poses: &[Pose],
    intr: &Intrinsics,
    size: (usize, usize),
    grid: &FloorGrid,
    oc: f64,
) -> Result<Vec<(usize, usize)>> {
    if !(0.0..=100.0).contains(&oc) {
        return Err(Error::invalid("oc must be in [0, 100]"));
    }
    let pts = grid.points()?;
    let vis: Vec<BTreeSet<usize>> = poses.iter().map(|p| visible(p, intr, size, &pts)).collect();
    let mut out = Vec::new();
    for i in 0..poses.len() {
        for j in i + 1..poses.len() {
            let denom = vis[i].len().max(vis[j].len());
            let frac = if denom == 0 {
                0.0
            } else {
                vis[i].intersection(&vis[j]).count() as f64 / denom as f64
            };
            if oc == 0.0 || 100.0 * frac >= oc {
                out.push((i, j));
            }
        }
    }
    Ok(out)
}
