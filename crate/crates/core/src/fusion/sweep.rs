use std::path::Path;

use serde::Serialize;

use super::{build_windows, fuse_stream, train_fusion, FusionConfig, FusionNetwork, FusionWindow};
use crate::cells::{CellKind, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::{median_orientation_error, median_position_error, Pose};
use crate::par;
use crate::sim::PoseStreams;

pub const DEFAULT_N_T: [usize; 5] = [3, 6, 10, 15, 25];
pub const DEFAULT_R_U: [usize; 3] = [3, 5, 10];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepEntry {
    pub config: FusionConfig,
    pub iterations: usize,
}

/// One line of the ranking table. Baseline rows name their method in `cell`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub cell: String,
    pub stacked: bool,
    pub n_t: usize,
    pub r_u: usize,
    pub median_pos_m: f64,
    pub median_ori_deg: f64,
    pub rank: usize,
    pub iterations: usize,
    #[serde(skip)]
    pub error: Option<String>,
}

/// Cartesian product of the grid axes, all trained for `iterations`.
pub fn fusion_grid(
    base: &FusionConfig,
    cells: &[CellKind],
    stacking: &[bool],
    n_ts: &[usize],
    r_us: &[usize],
    iterations: usize,
) -> Vec<SweepEntry> {
    let mut out = Vec::new();
    for &cell in cells {
        for &stacked in stacking {
            for &n_t in n_ts {
                for &r_u in r_us {
                    out.push(SweepEntry {
                        config: FusionConfig {
                            cell,
                            stacked,
                            n_t,
                            r_u,
                            ..base.clone()
                        },
                        iterations,
                    });
                }
            }
        }
    }
    out
}

fn training_windows(streams: &[PoseStreams], n_t: usize) -> Result<Vec<FusionWindow>> {
    let mut all = Vec::new();
    for s in streams {
        all.extend(build_windows(&s.abs, &s.rel, n_t, Some(&s.gt))?);
    }
    Ok(all)
}

fn medians(preds: &[Vec<Pose>], test: &[PoseStreams]) -> Result<(f64, f64)> {
    if preds.len() != test.len() {
        return Err(Error::LengthMismatch {
            expected: test.len(),
            got: preds.len(),
        });
    }
    let pred: Vec<Pose> = preds.iter().flatten().copied().collect();
    let gt: Vec<Pose> = test.iter().flat_map(|s| s.gt.iter().copied()).collect();
    Ok((median_position_error(&pred, &gt)?, median_orientation_error(&pred, &gt)?))
}

fn run_entry(e: &SweepEntry, train: &[PoseStreams], test: &[PoseStreams], cfg: &TrainConfig) -> Result<(f64, f64)> {
    let windows = training_windows(train, e.config.n_t)?;
    let mut net = FusionNetwork::new(e.config.clone(), cfg.seed)?;
    net.fit_normalization(&windows)?;
    let cfg = TrainConfig {
        iterations: e.iterations,
        ..cfg.clone()
    };
    train_fusion(&mut net, &windows, &cfg)?;
    let preds = test
        .iter()
        .map(|s| fuse_stream(&net, &s.abs, &s.rel))
        .collect::<Result<Vec<_>>>()?;
    medians(&preds, test)
}

/// Trains every entry with the same seed and evaluates it on `test`.
///
/// Failed runs are kept as rows with NaN errors and ranked last. Rows come
/// back in entry order with ranks assigned.
pub fn sweep_fusion(
    entries: &[SweepEntry],
    train: &[PoseStreams],
    test: &[PoseStreams],
    config: &TrainConfig,
) -> Vec<SweepRow> {
    let mut rows = par::map_slice(entries, |e| {
        let (pos, ori, error) = match run_entry(e, train, test, config) {
            Ok((p, o)) => (p, o, None),
            Err(err) => {
                log::warn!("fusion run {} n_t={} r_u={} failed: {err}", e.config.cell, e.config.n_t, e.config.r_u);
                (f64::NAN, f64::NAN, Some(err.to_string()))
            }
        };
        SweepRow {
            cell: e.config.cell.name().to_string(),
            stacked: e.config.stacked,
            n_t: e.config.n_t,
            r_u: e.config.r_u,
            median_pos_m: pos,
            median_ori_deg: ori,
            rank: 0,
            iterations: e.iterations,
            error,
        }
    });
    rank_rows(&mut rows);
    rows
}

/// Row for a non-learned method whose predictions on `test` are `preds`.
pub fn baseline_row(name: &str, preds: &[Vec<Pose>], test: &[PoseStreams]) -> Result<SweepRow> {
    let (pos, ori) = medians(preds, test)?;
    Ok(SweepRow {
        cell: name.to_string(),
        stacked: false,
        n_t: 0,
        r_u: 0,
        median_pos_m: pos,
        median_ori_deg: ori,
        rank: 0,
        iterations: 0,
        error: None,
    })
}

/// Ranks by median position error, then orientation error, then row order;
/// rows with non-finite errors go last.
pub fn rank_rows(rows: &mut [SweepRow]) {
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    let key = |r: &SweepRow| {
        let ok = r.median_pos_m.is_finite() && r.median_ori_deg.is_finite();
        (!ok, r.median_pos_m, r.median_ori_deg)
    };
    idx.sort_by(|&a, &b| {
        let (ka, kb) = (key(&rows[a]), key(&rows[b]));
        ka.0.cmp(&kb.0)
            .then(ka.1.total_cmp(&kb.1))
            .then(ka.2.total_cmp(&kb.2))
            .then(a.cmp(&b))
    });
    for (r, i) in idx.into_iter().enumerate() {
        rows[i].rank = r + 1;
    }
}

/// Columns `cell,stacked,n_t,r_u,median_pos_m,median_ori_deg,rank,iterations`.
pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
