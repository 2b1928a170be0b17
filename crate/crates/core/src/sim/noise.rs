use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{project_landmarks, Scene, IMAGE_HEIGHT, IMAGE_WIDTH};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, Quat, Vec3};

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic unit-variance pixel noise for one (image, landmark) pair, so
/// a landmark's observed pixel in an image is the same in every pair it joins.
pub fn pixel_noise(seed: u64, image: usize, landmark: usize) -> Vector2<f64> {
    let key = mix(mix(seed ^ 0x9e3779b97f4a7c15) ^ (image as u64)) ^ mix(landmark as u64 ^ 0x5851f42d4c957f2d);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    Vector2::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng))
}

/// Noisy visible observations per image: `(landmark id, pixel)`.
pub fn observe(
    scene: &Scene,
    poses: &[Pose],
    intr: &Intrinsics,
    sigma: f64,
    seed: u64,
) -> Vec<Vec<(usize, Vector2<f64>)>> {
    crate::par::map_range(poses.len(), |i| {
        project_landmarks(scene, &poses[i], intr)
            .into_iter()
            .map(|(id, uv)| (id, uv + pixel_noise(seed, i, id) * sigma))
            .collect()
    })
}

/// One correspondence between two images, with its ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: Vector2<f64>,
    pub b: Vector2<f64>,
    pub landmark: usize,
    /// `false` when `b` was replaced by a random pixel.
    pub inlier: bool,
}

/// A match tagged with the images it connects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMatch {
    pub img_a: usize,
    pub img_b: usize,
    pub m: Match,
}

fn check_rate(name: &str, r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::invalid(format!("{name} must be in [0, 1], got {r}")));
    }
    Ok(())
}

fn match_lists(
    obs_a: &[(usize, Vector2<f64>)],
    obs_b: &[(usize, Vector2<f64>)],
    outlier_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Match> {
    let mut out = Vec::new();
    let mut j = 0;
    for (id, a) in obs_a {
        while j < obs_b.len() && obs_b[j].0 < *id {
            j += 1;
        }
        if j < obs_b.len() && obs_b[j].0 == *id {
            let mut m = Match {
                a: *a,
                b: obs_b[j].1,
                landmark: *id,
                inlier: true,
            };
            if outlier_rate > 0.0 && rng.random_bool(outlier_rate) {
                m.b = Vector2::new(
                    rng.random_range(0.0..IMAGE_WIDTH as f64),
                    rng.random_range(0.0..IMAGE_HEIGHT as f64),
                );
                m.inlier = false;
            }
            out.push(m);
        }
    }
    out
}

/// Matches between two views of co-visible landmarks.
pub fn synth_matches(
    scene: &Scene,
    a: &Pose,
    b: &Pose,
    intr: &Intrinsics,
    sigma: f64,
    outlier_rate: f64,
    seed: u64,
) -> Result<Vec<Match>> {
    check_rate("outlier rate", outlier_rate)?;
    let obs = observe(scene, &[*a, *b], intr, sigma, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0xa076_1d64));
    Ok(match_lists(&obs[0], &obs[1], outlier_rate, &mut rng))
}

/// Matches for every image pair `(i, j)`, `i < j`, that shares at least
/// `min_shared` landmarks.
pub fn pair_matches(
    scene: &Scene,
    poses: &[Pose],
    intr: &Intrinsics,
    sigma: f64,
    outlier_rate: f64,
    min_shared: usize,
    seed: u64,
) -> Result<Vec<PairMatch>> {
    check_rate("outlier rate", outlier_rate)?;
    let obs = observe(scene, poses, intr, sigma, seed);
    let mut out = Vec::new();
    for i in 0..poses.len() {
        for j in i + 1..poses.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix((i * poses.len() + j) as u64)));
            let ms = match_lists(&obs[i], &obs[j], outlier_rate, &mut rng);
            if ms.len() >= min_shared.max(1) {
                out.extend(ms.into_iter().map(|m| PairMatch { img_a: i, img_b: j, m }));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Degraded {
    pub poses: Vec<Pose>,
    pub outlier: Vec<bool>,
}

/// Gaussian position/orientation noise plus sparse gross position outliers
/// of fixed magnitude in a uniformly random direction.
pub fn degrade_absolute(
    gt: &[Pose],
    sigma_p: f64,
    sigma_q_deg: f64,
    outlier_rate: f64,
    outlier_magnitude: f64,
    seed: u64,
) -> Result<Degraded> {
    check_rate("outlier rate", outlier_rate)?;
    if !(sigma_p >= 0.0 && sigma_q_deg >= 0.0 && outlier_magnitude >= 0.0) {
        return Err(Error::invalid("noise levels must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let np = Normal::new(0.0, sigma_p).unwrap();
    let nq = Normal::new(0.0, sigma_q_deg.to_radians()).unwrap();
    let mut poses = Vec::with_capacity(gt.len());
    let mut outlier = Vec::with_capacity(gt.len());
    for g in gt {
        let dp = Vec3::from_fn(|_, _| np.sample(&mut rng));
        let dr = Vec3::from_fn(|_, _| nq.sample(&mut rng));
        let is_out = outlier_rate > 0.0 && rng.random_bool(outlier_rate);
        let mut p = g.p + dp;
        if is_out {
            let dir = Vec3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            p += dir.normalize() * outlier_magnitude;
        }
        let q = if sigma_q_deg > 0.0 { g.q * Quat::exp(dr) } else { g.q };
        poses.push(Pose::new(p, q)?);
        outlier.push(is_out);
    }
    Ok(Degraded { poses, outlier })
}
