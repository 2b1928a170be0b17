use std::path::Path;

use serde::{Deserialize, Serialize};

use super::make_rpr_target;
use crate::error::{Error, Result};
use crate::flow::{mean_pool, read_flow, write_flow, FlowField};
use crate::geometry::{Intrinsics, Pose, Quat, RelativePose, Vec3};
use crate::sim::{synth_flow, SceneSpec, IMAGE_HEIGHT, IMAGE_WIDTH};

/// One training pair: pooled flow and the relative pose it encodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RprSample {
    pub flow: FlowField,
    pub target: RelativePose,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    flow_file: String,
    dp_x: f64,
    dp_y: f64,
    dp_z: f64,
    dq_w: f64,
    dq_x: f64,
    dq_y: f64,
    dq_z: f64,
}

/// Reads a manifest; flow paths are relative to the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<RprSample>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: ManifestRow = row?;
        let flow = read_flow(base.join(&r.flow_file))?;
        out.push(RprSample {
            flow,
            target: RelativePose {
                dp: Vec3::new(r.dp_x, r.dp_y, r.dp_z),
                dq: Quat::new(r.dq_w, r.dq_x, r.dq_y, r.dq_z),
            },
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(out)
}

/// Writes `flow_NNNNN.flow` files plus `manifest.csv` into `dir`.
pub fn write_manifest(dir: impl AsRef<Path>, samples: &[RprSample]) -> Result<std::path::PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    for (i, s) in samples.iter().enumerate() {
        let name = format!("flow_{i:05}.flow");
        write_flow(&s.flow, dir.join(&name))?;
        let [dq_w, dq_x, dq_y, dq_z] = s.target.dq.to_array();
        w.serialize(ManifestRow {
            flow_file: name,
            dp_x: s.target.dp.x,
            dp_y: s.target.dp.y,
            dp_z: s.target.dp.z,
            dq_w,
            dq_x,
            dq_y,
            dq_z,
        })?;
    }
    w.flush()?;
    Ok(manifest)
}

/// Analytic 640×480 flow between consecutive poses, pooled by `pool`.
pub fn sim_samples(scene: &SceneSpec, poses: &[Pose], intr: &Intrinsics, pool: usize) -> Result<Vec<RprSample>> {
    poses
        .windows(2)
        .map(|w| {
            let full = synth_flow(scene, &w[0], &w[1], intr, IMAGE_WIDTH, IMAGE_HEIGHT)?;
            Ok(RprSample {
                flow: mean_pool(&full, pool)?,
                target: make_rpr_target(&w[0], &w[1]),
            })
        })
        .collect()
}
