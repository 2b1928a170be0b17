//! Match files (`img_a,img_b,xa,ya,xb,yb`) and sectioned point-cloud files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::{PairMatches, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, Quat, Vec3};

#[derive(Serialize, Deserialize)]
struct MatchRow {
    img_a: usize,
    img_b: usize,
    xa: f64,
    ya: f64,
    xb: f64,
    yb: f64,
}

pub fn write_matches(path: impl AsRef<Path>, pairs: &[PairMatches]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for pm in pairs {
        for (a, b) in &pm.matches {
            w.serialize(MatchRow {
                img_a: pm.img_a,
                img_b: pm.img_b,
                xa: a.x,
                ya: a.y,
                xb: b.x,
                yb: b.y,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a match file, grouping rows by image pair in order of appearance.
pub fn read_matches(path: impl AsRef<Path>) -> Result<Vec<PairMatches>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out: Vec<PairMatches> = Vec::new();
    let mut index: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for row in rdr.deserialize() {
        let r: MatchRow = row?;
        if r.img_a == r.img_b {
            return Err(Error::Format(format!("match within image {}", r.img_a)));
        }
        let k = *index.entry((r.img_a, r.img_b)).or_insert_with(|| {
            out.push(PairMatches {
                img_a: r.img_a,
                img_b: r.img_b,
                matches: Vec::new(),
            });
            out.len() - 1
        });
        out[k].matches.push((Vector2::new(r.xa, r.ya), Vector2::new(r.xb, r.yb)));
    }
    Ok(out)
}

/// Sections `INTRINSICS`, `LANDMARKS` and `CAMERAS`, each a header line
/// followed by CSV rows.
pub fn write_point_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut s = String::new();
    let k = &cloud.intrinsics;
    let _ = writeln!(s, "INTRINSICS\nfx,fy,cx,cy\n{},{},{},{}", k.fx, k.fy, k.cx, k.cy);
    s.push_str("LANDMARKS\nid,x,y,z\n");
    for (id, x) in &cloud.landmarks {
        let _ = writeln!(s, "{id},{},{},{}", x.x, x.y, x.z);
    }
    s.push_str("CAMERAS\nid,px,py,pz,qw,qx,qy,qz\n");
    for (id, c) in &cloud.cameras {
        let _ = writeln!(s, "{id},{},{},{},{},{},{},{}", c.p.x, c.p.y, c.p.z, c.q.w, c.q.x, c.q.y, c.q.z);
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    let mut section = "";
    let mut intr = None;
    let mut landmarks = BTreeMap::new();
    let mut cameras = BTreeMap::new();
    let mut expect_header = false;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if matches!(line, "INTRINSICS" | "LANDMARKS" | "CAMERAS") {
            section = match line {
                "INTRINSICS" => "i",
                "LANDMARKS" => "l",
                _ => "c",
            };
            expect_header = true;
            continue;
        }
        if expect_header {
            expect_header = false;
            continue;
        }
        let bad = || Error::Format(format!("point cloud line {}: `{line}`", n + 1));
        let f: Vec<f64> = line.split(',').map(|v| v.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        match (section, f.len()) {
            ("i", 4) => intr = Some(Intrinsics::new(f[0], f[1], f[2], f[3])?),
            ("l", 4) => {
                landmarks.insert(f[0] as usize, Vec3::new(f[1], f[2], f[3]));
            }
            ("c", 8) => {
                let pose = Pose::new(Vec3::new(f[1], f[2], f[3]), Quat::new(f[4], f[5], f[6], f[7]))?;
                cameras.insert(f[0] as usize, pose);
            }
            _ => return Err(bad()),
        }
    }
    Ok(PointCloud {
        landmarks,
        cameras,
        intrinsics: intr.ok_or_else(|| Error::Format("point cloud lacks INTRINSICS".into()))?,
    })
}
