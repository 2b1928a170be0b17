use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SceneSpec;
use crate::error::{Error, Result};
use crate::geometry::{Mat3, Pose, Quat, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Robot,
    Handheld,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionProfile {
    pub kind: ProfileKind,
    /// Speed range in m/s.
    pub speed: [f64; 2],
    /// Maximum yaw rate in degrees per second.
    pub yaw_rate_max: f64,
    /// Per-frame positional jitter σ in meters.
    pub jitter_pos: f64,
    /// Per-frame rotational jitter σ in degrees.
    pub jitter_rot: f64,
    /// Camera height above the floor in meters.
    pub height: f64,
}

impl MotionProfile {
    pub fn robot() -> Self {
        MotionProfile {
            kind: ProfileKind::Robot,
            speed: [0.3, 1.0],
            yaw_rate_max: 30.0,
            jitter_pos: 0.002,
            jitter_rot: 0.1,
            height: 1.0,
        }
    }

    pub fn handheld() -> Self {
        MotionProfile {
            kind: ProfileKind::Handheld,
            speed: [0.4, 1.5],
            yaw_rate_max: 60.0,
            jitter_pos: 0.01,
            jitter_rot: 0.5,
            height: 1.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.speed;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(Error::invalid("speed range must be non-negative and ordered"));
        }
        if !(self.yaw_rate_max >= 0.0 && self.jitter_pos >= 0.0 && self.jitter_rot >= 0.0) {
            return Err(Error::invalid("yaw rate and jitter must be non-negative"));
        }
        Ok(())
    }
}

/// Camera-to-world rotation for a level camera looking along `heading`
/// (radians from +x): camera z forward, y down, x to the right.
pub fn camera_orientation(heading: f64) -> Quat {
    let (s, c) = heading.sin_cos();
    let z = Vec3::new(c, s, 0.0);
    let x = Vec3::new(s, -c, 0.0);
    let y = z.cross(&x);
    Quat::from_rotation_matrix(&Mat3::from_columns(&[x, y, z]))
}

/// Smooth seeded path inside the scene box.
///
/// Every consecutive translation is at most `speed[1] / rate` and every
/// consecutive rotation at most `yaw_rate_max / rate` degrees, jitter included.
pub fn generate_trajectory(
    profile: &MotionProfile,
    scene: &SceneSpec,
    duration: f64,
    rate: f64,
    seed: u64,
) -> Result<Vec<Pose>> {
    if !(duration > 0.0 && rate > 0.0) {
        return Err(Error::invalid("duration and rate must be positive"));
    }
    profile.validate()?;
    scene.validate()?;
    let n = (duration * rate).round().max(1.0) as usize;
    let dt = 1.0 / rate;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let (lo, hi) = (scene.lo(), scene.hi());
    let ext = hi - lo;
    let margin = (0.2 * ext.x.min(ext.y)).min(2.0);
    let z = (lo.z + profile.height).min(hi.z);
    let [vmin, vmax] = profile.speed;
    let wmax = profile.yaw_rate_max.to_radians();
    let step_max = vmax * dt;
    let turn_max = wmax * dt;

    let mut pos = Vec3::new(
        rng.random_range(lo.x + margin..hi.x - margin),
        rng.random_range(lo.y + margin..hi.y - margin),
        z,
    );
    let mut heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut speed = rng.random_range(vmin..=vmax);
    let mut omega = 0.0;
    let center = 0.5 * (lo + hi);
    let lookahead = (vmax * 2.0).max(margin);

    let mut out: Vec<Pose> = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            let ahead = pos + Vec3::new(heading.cos(), heading.sin(), 0.0) * lookahead;
            let leaving = ahead.x < lo.x + margin
                || ahead.x > hi.x - margin
                || ahead.y < lo.y + margin
                || ahead.y > hi.y - margin;
            if leaving {
                let to_center = (center.y - pos.y).atan2(center.x - pos.x);
                let diff = wrap(to_center - heading);
                omega = wmax * diff.signum();
            } else {
                omega += (-0.5 * omega + 0.6 * wmax * unit.sample(&mut rng)) * dt;
                omega = omega.clamp(-wmax, wmax);
            }
            speed += 0.3 * (vmax - vmin) * unit.sample(&mut rng) * dt;
            speed = speed.clamp(vmin, vmax);
            if vmax > 0.0 {
                heading = wrap(heading + omega * dt);
            }
            pos += Vec3::new(heading.cos(), heading.sin(), 0.0) * (speed * dt);
            pos.x = pos.x.clamp(lo.x, hi.x);
            pos.y = pos.y.clamp(lo.y, hi.y);
        }

        let jp = Vec3::from_fn(|_, _| profile.jitter_pos * unit.sample(&mut rng));
        let jr = Vec3::from_fn(|_, _| profile.jitter_rot.to_radians() * unit.sample(&mut rng));
        let p = pos + jp;
        let q = camera_orientation(heading) * Quat::exp(jr);

        let pose = match out.last() {
            None => Pose::new(p, q)?,
            Some(prev) => {
                let mut d = p - prev.p;
                if d.norm() > step_max {
                    d *= step_max / d.norm();
                }
                let mut r = (prev.q.conj() * q).log();
                if r.norm() > turn_max {
                    r *= turn_max / r.norm();
                }
                Pose::new(prev.p + d, prev.q * Quat::exp(r))?
            }
        };
        out.push(pose);
    }
    Ok(out)
}

fn wrap(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    let r = (a + std::f64::consts::PI).rem_euclid(t);
    r - std::f64::consts::PI
}
