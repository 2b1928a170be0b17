use std::collections::BTreeMap;

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::twoview::{refine_point, triangulate};
use super::{FeatureTrack, Observation, PairMatches, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};

/// Links pairwise matches into tracks.
///
/// Observations are keyed by image and exact pixel coordinates, so a feature
/// seen in several pairs joins a single track. Components holding two
/// observations from one image are dropped. Tracks are numbered in order of
/// first appearance.
pub fn build_tracks(pairs: &[PairMatches]) -> Vec<FeatureTrack> {
    let mut ids: BTreeMap<(usize, u64, u64), usize> = BTreeMap::new();
    let mut nodes: Vec<Observation> = Vec::new();
    let mut parent: Vec<usize> = Vec::new();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut node = |image: usize, px: Vector2<f64>, nodes: &mut Vec<Observation>, parent: &mut Vec<usize>| -> usize {
        *ids.entry((image, px.x.to_bits(), px.y.to_bits())).or_insert_with(|| {
            nodes.push(Observation { image, px });
            parent.push(parent.len());
            parent.len() - 1
        })
    };
    for pm in pairs {
        for (a, b) in &pm.matches {
            let i = node(pm.img_a, *a, &mut nodes, &mut parent);
            let j = node(pm.img_b, *b, &mut nodes, &mut parent);
            edges.push((i, j));
        }
    }
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(i, j) in &edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri.max(rj)] = ri.min(rj);
        }
    }
    let mut comps: BTreeMap<usize, (Vec<usize>, usize)> = BTreeMap::new();
    for k in 0..nodes.len() {
        let r = find(&mut parent, k);
        comps.entry(r).or_default().0.push(k);
    }
    for &(i, _) in &edges {
        let r = find(&mut parent, i);
        comps.get_mut(&r).unwrap().1 += 1;
    }
    let mut out = Vec::new();
    for (_, (members, count)) in comps {
        let mut obs: Vec<Observation> = members.iter().map(|k| nodes[*k]).collect();
        obs.sort_by_key(|o| o.image);
        if obs.windows(2).any(|w| w[0].image == w[1].image) {
            continue;
        }
        out.push(FeatureTrack {
            landmark: out.len(),
            observations: obs,
            match_count: count,
        });
    }
    out
}

/// Pixel residual `projection − observation` of every observation whose
/// camera is registered and sees the landmark in front of it.
pub fn track_residuals(cloud: &PointCloud, track: &FeatureTrack) -> Vec<Option<Vector2<f64>>> {
    let Some(x) = cloud.landmarks.get(&track.landmark) else {
        return vec![None; track.observations.len()];
    };
    track
        .observations
        .iter()
        .map(|o| {
            let cam = cloud.cameras.get(&o.image)?;
            cloud.intrinsics.project(&cam.world_to_camera(x)).map(|uv| uv - o.px)
        })
        .collect()
}

/// Exact 2-means labels; exhaustive up to 16 points, Lloyd beyond.
pub fn two_means(points: &[Vector2<f64>]) -> Vec<bool> {
    let n = points.len();
    if n < 2 {
        return vec![false; n];
    }
    let sse = |mask: &dyn Fn(usize) -> bool| -> f64 {
        let mut total = 0.0;
        for side in [false, true] {
            let sel: Vec<&Vector2<f64>> = (0..n).filter(|k| mask(*k) == side).map(|k| &points[k]).collect();
            if sel.is_empty() {
                return f64::INFINITY;
            }
            let c = sel.iter().copied().sum::<Vector2<f64>>() / sel.len() as f64;
            total += sel.iter().map(|p| (*p - c).norm_squared()).sum::<f64>();
        }
        total
    };
    if n <= 16 {
        // point 0 always on the `false` side
        let mut best = (f64::INFINITY, 0u32);
        for bits in 1u32..(1 << (n - 1)) {
            let m = |k: usize| k > 0 && bits >> (k - 1) & 1 == 1;
            let s = sse(&m);
            if s < best.0 {
                best = (s, bits);
            }
        }
        return (0..n).map(|k| k > 0 && best.1 >> (k - 1) & 1 == 1).collect();
    }
    let mean = points.iter().sum::<Vector2<f64>>() / n as f64;
    let far = |c: Vector2<f64>| (0..n).max_by(|a, b| (points[*a] - c).norm_squared().total_cmp(&(points[*b] - c).norm_squared())).unwrap();
    let i = far(mean);
    let j = far(points[i]);
    let (mut c0, mut c1) = (points[i], points[j]);
    let mut labels = vec![false; n];
    for _ in 0..100 {
        let next: Vec<bool> = points.iter().map(|p| (p - c1).norm_squared() < (p - c0).norm_squared()).collect();
        let changed = next != labels;
        labels = next;
        let mean_of = |side: bool, fallback: Vector2<f64>| {
            let sel: Vec<&Vector2<f64>> = points.iter().zip(&labels).filter(|(_, l)| **l == side).map(|(p, _)| p).collect();
            if sel.is_empty() {
                fallback
            } else {
                sel.iter().copied().sum::<Vector2<f64>>() / sel.len() as f64
            }
        };
        c0 = mean_of(false, c0);
        c1 = mean_of(true, c1);
        if !changed {
            break;
        }
    }
    if labels[0] {
        labels.iter_mut().for_each(|l| *l = !*l);
    }
    labels
}

/// Splits a track whose residuals spread more than `ex` pixels from their
/// mean into two by 2-means on the residual vectors.
///
/// The first cluster keeps the landmark id, the second gets `*next_id`
/// (which is then advanced). Clusters with fewer than `mm` observations are
/// discarded, so the result holds zero, one or two tracks.
pub fn cluster_separation(
    track: &FeatureTrack,
    residuals: &[Vector2<f64>],
    mm: usize,
    ex: f64,
    next_id: &mut usize,
) -> Result<Vec<FeatureTrack>> {
    if residuals.len() != track.observations.len() {
        return Err(Error::LengthMismatch {
            expected: track.observations.len(),
            got: residuals.len(),
        });
    }
    if residuals.is_empty() {
        return Ok(vec![track.clone()]);
    }
    let mean = residuals.iter().sum::<Vector2<f64>>() / residuals.len() as f64;
    let spread = residuals.iter().map(|r| (r - mean).norm()).fold(0.0, f64::max);
    if spread <= ex {
        return Ok(vec![track.clone()]);
    }
    let labels = two_means(residuals);
    let keep = mm.max(2);
    let mut out = Vec::new();
    for side in [false, true] {
        let obs: Vec<Observation> = track
            .observations
            .iter()
            .zip(&labels)
            .filter(|(_, l)| **l == side)
            .map(|(o, _)| *o)
            .collect();
        let landmark = if side {
            let id = *next_id;
            *next_id += 1;
            id
        } else {
            track.landmark
        };
        if obs.len() >= keep {
            out.push(FeatureTrack {
                landmark,
                observations: obs,
                match_count: track.match_count,
            });
        }
    }
    Ok(out)
}

/// Landmark position best explaining `obs` given the cloud's cameras, started
/// from `x0` when available.
pub(crate) fn fit_landmark(cloud: &PointCloud, obs: &[Observation], x0: Option<Vec3>) -> Option<Vec3> {
    let poses: Vec<Pose> = obs.iter().map(|o| cloud.cameras.get(&o.image).copied()).collect::<Option<_>>()?;
    let px: Vec<Vector2<f64>> = obs.iter().map(|o| o.px).collect();
    let start = match x0 {
        Some(x) => x,
        None => {
            let rays: Vec<Vec3> = px.iter().map(|p| cloud.intrinsics.unproject(p)).collect();
            triangulate(&poses, &rays)?
        }
    };
    Some(refine_point(&poses, &px, &cloud.intrinsics, start))
}

/// Mean pixel reprojection error of `obs` after re-fitting the landmark.
fn mean_error(cloud: &PointCloud, obs: &[Observation], x0: Option<Vec3>) -> f64 {
    let Some(x) = fit_landmark(cloud, obs, x0) else {
        return f64::INFINITY;
    };
    let mut total = 0.0;
    for o in obs {
        match cloud.intrinsics.project(&cloud.cameras[&o.image].world_to_camera(&x)) {
            Some(uv) => total += (uv - o.px).norm(),
            None => return f64::INFINITY,
        }
    }
    total / obs.len() as f64
}

/// Leave-one-out exclusion: observations are visited in a seeded random
/// order and dropped when that lowers the track's mean reprojection error
/// (by more than 1e-9 px). Passes repeat until one drops nothing or `mm`
/// observations remain. Observations in unregistered images are kept as is.
pub fn gibbs_exclude(cloud: &PointCloud, track: &FeatureTrack, gibbs: bool, mm: usize, seed: u64) -> FeatureTrack {
    if !gibbs || track.observations.len() < mm + 1 {
        return track.clone();
    }
    let (mut reg, other): (Vec<Observation>, Vec<Observation>) =
        track.observations.iter().partition(|o| cloud.cameras.contains_key(&o.image));
    let x0 = cloud.landmarks.get(&track.landmark).copied();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (track.landmark as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut current = mean_error(cloud, &reg, x0);
    loop {
        let mut order: Vec<usize> = reg.iter().map(|o| o.image).collect();
        order.shuffle(&mut rng);
        let mut dropped = false;
        for image in order {
            if reg.len() + other.len() <= mm || reg.len() <= 2 {
                break;
            }
            let cand: Vec<Observation> = reg.iter().filter(|o| o.image != image).copied().collect();
            let e = mean_error(cloud, &cand, x0);
            if e < current - 1e-9 {
                reg = cand;
                current = e;
                dropped = true;
            }
        }
        if !dropped || reg.len() + other.len() <= mm || reg.len() <= 2 {
            break;
        }
    }
    let mut observations: Vec<Observation> = reg.into_iter().chain(other).collect();
    observations.sort_by_key(|o| o.image);
    FeatureTrack {
        landmark: track.landmark,
        observations,
        match_count: track.match_count,
    }
}
