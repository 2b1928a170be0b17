//! CSV pose streams shared by every pipeline stage.
//!
//! Absolute: `t,px,py,pz,qw,qx,qy,qz`. Relative: `t,dp_x,dp_y,dp_z,dq_w,dq_x,dq_y,dq_z`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Pose, Quat, RelativePose, Vec3};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct PoseRow {
    t: f64,
    px: f64,
    py: f64,
    pz: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RelRow {
    t: f64,
    dp_x: f64,
    dp_y: f64,
    dp_z: f64,
    dq_w: f64,
    dq_x: f64,
    dq_y: f64,
    dq_z: f64,
}

/// Timestamped absolute poses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseStream {
    pub t: Vec<f64>,
    pub poses: Vec<Pose>,
}

impl PoseStream {
    pub fn new(t: Vec<f64>, poses: Vec<Pose>) -> Result<Self> {
        if t.len() != poses.len() {
            return Err(Error::LengthMismatch {
                expected: t.len(),
                got: poses.len(),
            });
        }
        Ok(Self { t, poses })
    }

    /// Stream sampled at `rate` Hz starting from zero.
    pub fn uniform(poses: Vec<Pose>, rate: f64) -> Self {
        let t = (0..poses.len()).map(|i| i as f64 / rate).collect();
        Self { t, poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut out = Self::default();
        for row in rdr.deserialize() {
            let r: PoseRow = row?;
            out.t.push(r.t);
            out.poses.push(Pose::new(
                Vec3::new(r.px, r.py, r.pz),
                Quat::new(r.qw, r.qx, r.qy, r.qz),
            )?);
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (t, p) in self.t.iter().zip(&self.poses) {
            w.serialize(PoseRow {
                t: *t,
                px: p.p.x,
                py: p.p.y,
                pz: p.p.z,
                qw: p.q.w,
                qx: p.q.x,
                qy: p.q.y,
                qz: p.q.z,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Timestamped relative poses; entry `i` carries the delta arriving at `t[i]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelativeStream {
    pub t: Vec<f64>,
    pub rel: Vec<RelativePose>,
}

impl RelativeStream {
    pub fn len(&self) -> usize {
        self.rel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rel.is_empty()
    }

    /// Deltas between consecutive poses, timestamped at the later pose.
    pub fn from_poses(stream: &PoseStream) -> Self {
        let rel = stream
            .poses
            .windows(2)
            .map(|w| super::relative_pose(&w[0], &w[1]))
            .collect();
        Self {
            t: stream.t.iter().skip(1).copied().collect(),
            rel,
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut out = Self::default();
        for row in rdr.deserialize() {
            let r: RelRow = row?;
            out.t.push(r.t);
            out.rel.push(RelativePose {
                dp: Vec3::new(r.dp_x, r.dp_y, r.dp_z),
                dq: Quat::new(r.dq_w, r.dq_x, r.dq_y, r.dq_z).normalized()?,
            });
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (t, r) in self.t.iter().zip(&self.rel) {
            w.serialize(RelRow {
                t: *t,
                dp_x: r.dp.x,
                dp_y: r.dp.y,
                dp_z: r.dp.z,
                dq_w: r.dq.w,
                dq_x: r.dq.x,
                dq_y: r.dq.y,
                dq_z: r.dq.z,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let poses: Vec<Pose> = (0..5)
            .map(|i| {
                let f = i as f64;
                Pose::new(
                    Vec3::new(f * 0.1, 1.0 / (f + 3.0), -f),
                    Quat::new(1.0, 0.1 * f, -0.03, 0.2),
                )
                .unwrap()
            })
            .collect();
        let s = PoseStream::uniform(poses, 23.0);
        let path = dir.path().join("p.csv");
        s.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,px,py,pz,qw,qx,qy,qz\n"));
        assert_eq!(PoseStream::read(&path).unwrap(), s);

        let r = RelativeStream::from_poses(&s);
        let rpath = dir.path().join("r.csv");
        r.write(&rpath).unwrap();
        let text = std::fs::read_to_string(&rpath).unwrap();
        assert!(text.starts_with("t,dp_x,dp_y,dp_z,dq_w,dq_x,dq_y,dq_z\n"));
        let back = RelativeStream::read(&rpath).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back.t, r.t);
        for (a, b) in back.rel.iter().zip(&r.rel) {
            assert_eq!(a.dp, b.dp);
            assert!(a.dq.angle_to(b.dq) < 1e-7);
        }
    }
}
