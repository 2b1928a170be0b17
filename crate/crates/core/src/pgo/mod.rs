//! Chunked pose-graph refinement of an absolute stream with relative edges.

mod solver;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Quat, RelativePose, Vec3};

pub use solver::{optimize_chunk, ChunkResult};

/// Residual weights `(w_abs_p, w_abs_q, w_rel_p, w_rel_q)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgoWeights {
    pub w_abs_p: f64,
    pub w_abs_q: f64,
    pub w_rel_p: f64,
    pub w_rel_q: f64,
}

impl Default for PgoWeights {
    fn default() -> Self {
        PgoWeights {
            w_abs_p: 1.0,
            w_abs_q: 1.0,
            w_rel_p: 10.0,
            w_rel_q: 10.0,
        }
    }
}

impl PgoWeights {
    /// Absolute weights anchor the gauge and must be positive; relative
    /// weights may be zero.
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_abs_p, self.w_abs_q, self.w_rel_p, self.w_rel_q];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) || self.w_abs_p <= 0.0 || self.w_abs_q <= 0.0 {
            return Err(Error::invalid(format!("bad PGO weights {all:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    pub nodes: Vec<Pose>,
    pub edges: Vec<RelativePose>,
    pub weights: PgoWeights,
}

impl PoseGraph {
    pub fn new(nodes: Vec<Pose>, edges: Vec<RelativePose>, weights: PgoWeights) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::EmptyInput);
        }
        if edges.len() + 1 != nodes.len() {
            return Err(Error::LengthMismatch {
                expected: nodes.len() - 1,
                got: edges.len(),
            });
        }
        weights.validate()?;
        Ok(PoseGraph { nodes, edges, weights })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub chunk_size: usize,
    pub overlap: usize,
    pub ranges: Vec<Range<usize>>,
}

impl ChunkPlan {
    pub fn starts(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.start).collect()
    }

    /// Per-node `(chunk index, weight)` lists. Each chunk weighs a node by its
    /// distance to the nearer chunk end, normalized over the chunks covering
    /// the node; across a two-chunk overlap of length `L` the later chunk's
    /// weight ramps as `(j - s + 1) / (L + 1)`.
    pub fn blend_weights(&self, n: usize) -> Vec<Vec<(usize, f64)>> {
        let last = self.ranges.len().saturating_sub(1);
        let mut out = vec![Vec::new(); n];
        for (k, r) in self.ranges.iter().enumerate() {
            for j in r.clone().take_while(|j| *j < n) {
                // the stream ends never taper
                let left = if k == 0 { f64::INFINITY } else { (j - r.start + 1) as f64 };
                let right = if k == last { f64::INFINITY } else { (r.end - j) as f64 };
                out[j].push((k, left.min(right)));
            }
        }
        for ws in &mut out {
            if ws.len() == 1 {
                ws[0].1 = 1.0;
            } else {
                let total: f64 = ws.iter().map(|w| w.1).sum();
                ws.iter_mut().for_each(|w| w.1 /= total);
            }
        }
        out
    }
}

pub fn plan_chunks(n: usize, chunk_size: usize, overlap: usize) -> Result<ChunkPlan> {
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if chunk_size == 0 || overlap >= chunk_size {
        return Err(Error::invalid(format!(
            "need 0 <= overlap < chunk_size, got overlap {overlap}, size {chunk_size}"
        )));
    }
    let stride = chunk_size - overlap;
    let ranges = (0..)
        .map(|k| k * stride)
        .take_while(|s| *s < n)
        .map(|s| s..(s + chunk_size).min(n))
        .collect();
    Ok(ChunkPlan {
        chunk_size,
        overlap,
        ranges,
    })
}

/// Weighted average of poses; quaternions are sign-aligned to the first.
fn blend(poses: &[(Pose, f64)]) -> Pose {
    let mut p = Vec3::zeros();
    let mut q = [0.0; 4];
    let q0 = poses[0].0.q;
    for (pose, w) in poses {
        p += pose.p * *w;
        let s = if pose.q.dot(q0) < 0.0 { -w } else { *w };
        for (a, b) in q.iter_mut().zip(pose.q.to_array()) {
            *a += s * b;
        }
    }
    let q = Quat::from_array(q);
    Pose {
        p,
        q: q.scale(1.0 / q.norm()).canonical(),
    }
}

/// Optimizes each chunk independently (in parallel) and stitches the results.
pub fn refine_stream(
    abs: &[Pose],
    rel: &[RelativePose],
    weights: &PgoWeights,
    plan: &ChunkPlan,
) -> Result<Vec<Pose>> {
    weights.validate()?;
    if abs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if rel.len() + 1 != abs.len() {
        return Err(Error::LengthMismatch {
            expected: abs.len() - 1,
            got: rel.len(),
        });
    }
    if abs.len() == 1 {
        return Ok(abs.to_vec());
    }
    if plan.ranges.last().map(|r| r.end) != Some(abs.len()) {
        return Err(Error::invalid("chunk plan does not match the stream length"));
    }
    let chunks: Vec<Result<ChunkResult>> = crate::par::map_slice(&plan.ranges, |r| {
        let edges = &rel[r.start..r.end - 1];
        optimize_chunk(&abs[r.clone()], edges, weights)
    });
    let chunks: Vec<ChunkResult> = chunks.into_iter().collect::<Result<_>>()?;
    for (k, c) in chunks.iter().enumerate() {
        if !c.converged {
            log::warn!("pgo chunk {k} stopped after {} iterations without converging", c.iterations);
        }
    }
    let weights = plan.blend_weights(abs.len());
    Ok(weights
        .iter()
        .enumerate()
        .map(|(j, ws)| {
            let parts: Vec<(Pose, f64)> = ws
                .iter()
                .map(|(k, w)| (chunks[*k].poses[j - plan.ranges[*k].start], *w))
                .collect();
            if parts.len() == 1 {
                parts[0].0
            } else {
                blend(&parts)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests;
