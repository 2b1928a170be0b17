//! Seeded generators for trajectories, landmark scenes, feature matches, flow
//! fields and degraded absolute pose streams.

mod noise;
mod render;
mod trajectory;

pub use noise::{
    degrade_absolute, observe, pair_matches, pixel_noise, synth_matches, Degraded, Match,
    PairMatch,
};
pub use render::{render, synth_flow, texture_at};
pub use trajectory::{camera_orientation, generate_trajectory, MotionProfile, ProfileKind};

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{relative_pose, Intrinsics, Pose, RelativePose, Vec3};

pub const IMAGE_WIDTH: usize = 640;
pub const IMAGE_HEIGHT: usize = 480;

/// Scene layout: an axis-aligned box (floor at `min.z`) with landmarks on
/// the walls, the floor and a few free-standing racks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub landmark_count: usize,
    pub racks: usize,
    /// Fraction of each wall's length left without landmarks.
    pub feature_poor_fraction: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            min: [14.0, 7.0, 0.0],
            max: [34.0, 23.0, 4.0],
            landmark_count: 3000,
            racks: 4,
            feature_poor_fraction: 0.1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|i| !(self.max[i] > self.min[i])) {
            return Err(Error::invalid("scene box extents must be positive"));
        }
        if self.landmark_count < 8 {
            return Err(Error::invalid("a scene needs at least 8 landmarks"));
        }
        if !(0.0..1.0).contains(&self.feature_poor_fraction) {
            return Err(Error::invalid("feature_poor_fraction must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn lo(&self) -> Vec3 {
        Vec3::from(self.min)
    }

    pub fn hi(&self) -> Vec3 {
        Vec3::from(self.max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub landmarks: Vec<Vec3>,
}

impl Scene {
    /// A scene with caller-supplied landmarks inside `spec`'s box.
    pub fn from_landmarks(spec: SceneSpec, landmarks: Vec<Vec3>) -> Self {
        Scene { spec, landmarks }
    }
}

pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (spec.lo(), spec.hi());
    let ext = hi - lo;

    // Walls as (origin, along, length); height spans the box.
    let walls = [
        (Vec3::new(lo.x, lo.y, lo.z), Vec3::x(), ext.x),
        (Vec3::new(hi.x, lo.y, lo.z), Vec3::y(), ext.y),
        (Vec3::new(hi.x, hi.y, lo.z), -Vec3::x(), ext.x),
        (Vec3::new(lo.x, hi.y, lo.z), -Vec3::y(), ext.y),
    ];
    let holes: Vec<(f64, f64)> = walls
        .iter()
        .map(|_| {
            let start = rng.random_range(0.0..1.0 - spec.feature_poor_fraction);
            (start, start + spec.feature_poor_fraction)
        })
        .collect();
    let racks: Vec<(Vec3, Vec3, f64, f64)> = (0..spec.racks)
        .map(|_| {
            let len = rng.random_range(0.15..0.3) * ext.x.min(ext.y);
            let along = if rng.random_bool(0.5) { Vec3::x() } else { Vec3::y() };
            let margin = 0.25;
            let o = Vec3::new(
                lo.x + ext.x * rng.random_range(margin..1.0 - margin),
                lo.y + ext.y * rng.random_range(margin..1.0 - margin),
                lo.z,
            ) - along * (0.5 * len);
            (o, along, len, 0.6 * ext.z)
        })
        .collect();

    let wall_area = 2.0 * (ext.x + ext.y) * ext.z;
    let rack_area: f64 = racks.iter().map(|r| r.2 * r.3).sum();
    let floor_area = ext.x * ext.y;
    let total = wall_area + rack_area + floor_area;

    let mut landmarks = Vec::with_capacity(spec.landmark_count);
    while landmarks.len() < spec.landmark_count {
        let pick = rng.random_range(0.0..total);
        let pt = if pick < wall_area {
            let w = rng.random_range(0..4);
            let (o, along, len) = walls[w];
            let s: f64 = rng.random_range(0.0..1.0);
            if s >= holes[w].0 && s < holes[w].1 {
                continue;
            }
            o + along * (s * len) + Vec3::z() * rng.random_range(0.0..ext.z)
        } else if pick < wall_area + rack_area {
            let (o, along, len, h) = racks[rng.random_range(0..racks.len())];
            o + along * rng.random_range(0.0..len) + Vec3::z() * rng.random_range(0.0..h)
        } else {
            Vec3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                lo.z,
            )
        };
        landmarks.push(pt);
    }
    Ok(Scene {
        spec: spec.clone(),
        landmarks,
    })
}

/// Pixel of `x` in a 640×480 image, or `None` when behind or outside.
pub fn project_point(pose: &Pose, intr: &Intrinsics, x: &Vec3) -> Option<Vector2<f64>> {
    let uv = intr.project(&pose.world_to_camera(x))?;
    let inside = uv.x >= 0.0 && uv.y >= 0.0 && uv.x < IMAGE_WIDTH as f64 && uv.y < IMAGE_HEIGHT as f64;
    inside.then_some(uv)
}

/// Visible landmarks as `(landmark id, pixel)`, in id order.
pub fn project_landmarks(scene: &Scene, pose: &Pose, intr: &Intrinsics) -> Vec<(usize, Vector2<f64>)> {
    scene
        .landmarks
        .iter()
        .enumerate()
        .filter_map(|(i, x)| project_point(pose, intr, x).map(|uv| (i, uv)))
        .collect()
}

/// Everything a scenario needs: scene, motion, and noise levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub duration: f64,
    pub rate: f64,
    pub profile: MotionProfile,
    pub scene: SceneSpec,
    pub noise: NoiseSpec,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            duration: 60.0,
            rate: 23.0,
            profile: MotionProfile::robot(),
            scene: SceneSpec::default(),
            noise: NoiseSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma_p: f64,
    pub sigma_q_deg: f64,
    pub outlier_rate: f64,
    pub outlier_magnitude: f64,
    pub match_sigma_px: f64,
    pub match_outlier_rate: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigma_p: 0.2,
            sigma_q_deg: 2.0,
            outlier_rate: 0.05,
            outlier_magnitude: 1.0,
            match_sigma_px: 0.5,
            match_outlier_rate: 0.0,
        }
    }
}

/// Aligned ground truth, degraded absolute stream and exact relative edges
/// (`rel[i]` connects pose `i` to pose `i + 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct PoseStreams {
    pub gt: Vec<Pose>,
    pub abs: Vec<Pose>,
    pub rel: Vec<RelativePose>,
}

/// Trajectory for `spec` with its absolute stream degraded per `spec.noise`.
pub fn simulate_streams(spec: &ScenarioSpec, seed: u64) -> Result<PoseStreams> {
    let gt = generate_trajectory(&spec.profile, &spec.scene, spec.duration, spec.rate, seed)?;
    let n = &spec.noise;
    let abs = degrade_absolute(
        &gt,
        n.sigma_p,
        n.sigma_q_deg,
        n.outlier_rate,
        n.outlier_magnitude,
        seed ^ 0x5eed_ab50,
    )?
    .poses;
    let rel = gt.windows(2).map(|w| relative_pose(&w[0], &w[1])).collect();
    Ok(PoseStreams { gt, abs, rel })
}
