use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{sfm_stage, simulate_runs, source_streams, stage, ExperimentConfig};
use crate::error::{Error, Result};
use crate::fusion::{baseline_row, fusion_grid, rank_rows, sweep_fusion, SweepEntry, SweepRow};
use crate::geometry::{median_orientation_error, median_position_error};
use crate::pgo::{plan_chunks, refine_stream};
use crate::sfm::SfmConfig;
use crate::sim::PoseStreams;

/// Values tried for each reconstruction hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfmGrid {
    pub sc: Vec<f64>,
    pub oc: Vec<f64>,
    pub mm: Vec<usize>,
    pub ex: Vec<f64>,
    pub gibbs: Vec<bool>,
    pub std: Vec<f64>,
}

impl Default for SfmGrid {
    fn default() -> Self {
        SfmGrid {
            sc: vec![0.0, 50.0],
            oc: vec![0.0, 20.0],
            mm: vec![2, 3, 4],
            ex: vec![0.5, 1.0, 2.0],
            gibbs: vec![false, true],
            std: vec![2.0, 3.0],
        }
    }
}

impl SfmGrid {
    /// Every combination, varying `std` fastest and `sc` slowest.
    pub fn configs(&self, base: &SfmConfig) -> Vec<SfmConfig> {
        let mut out = Vec::new();
        for &sc in &self.sc {
            for &oc in &self.oc {
                for &mm in &self.mm {
                    for &ex in &self.ex {
                        for &gibbs in &self.gibbs {
                            for &std in &self.std {
                                out.push(SfmConfig {
                                    sc,
                                    oc,
                                    mm,
                                    ex,
                                    gibbs,
                                    std,
                                    ..base.clone()
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfmSweepRow {
    pub sc: f64,
    pub oc: f64,
    pub mm: usize,
    pub ex: f64,
    pub gibbs: bool,
    pub std: f64,
    pub median_pos_m: f64,
    pub median_ori_deg: f64,
    pub landmarks: usize,
    /// Observations used by the final bundle adjustment.
    pub observations: usize,
    pub localized: usize,
    pub failed_frames: usize,
    pub failed: bool,
    pub error: String,
}

/// Reconstructs and localizes the test run once per grid point. Failing
/// combinations become rows with `failed` set and NaN errors.
pub fn sweep_sfm(cfg: &ExperimentConfig, grid: &SfmGrid) -> Result<Vec<SfmSweepRow>> {
    let configs = grid.configs(&cfg.sfm);
    if configs.is_empty() {
        return Err(Error::Config("sfm sweep grid is empty".into()));
    }
    let runs = simulate_runs(cfg)?;
    Ok(crate::par::map_slice(&configs, |c| {
        let mut row = SfmSweepRow {
            sc: c.sc,
            oc: c.oc,
            mm: c.mm,
            ex: c.ex,
            gibbs: c.gibbs,
            std: c.std,
            median_pos_m: f64::NAN,
            median_ori_deg: f64::NAN,
            landmarks: 0,
            observations: 0,
            localized: 0,
            failed_frames: 0,
            failed: false,
            error: String::new(),
        };
        let result = sfm_stage(cfg, c, &runs).and_then(|o| {
            let pos = median_position_error(&o.streams[0], &runs[0].gt)?;
            let ori = median_orientation_error(&o.streams[0], &runs[0].gt)?;
            Ok((o, pos, ori))
        });
        match result {
            Ok((o, pos, ori)) => {
                row.median_pos_m = pos;
                row.median_ori_deg = ori;
                row.landmarks = o.reconstruction.cloud.landmarks.len();
                row.observations = o.reconstruction.observations;
                row.localized = o.localized;
                row.failed_frames = o.failed;
            }
            Err(e) => {
                log::warn!("sfm sweep point {c:?} failed: {e}");
                row.failed = true;
                row.error = e.to_string();
            }
        }
        row
    }))
}

pub fn write_sfm_sweep_csv(path: impl AsRef<Path>, rows: &[SfmSweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains every fusion network of `cfg.sweep_fusion` on the training runs and
/// ranks it on the test run, optionally next to an untrained control and the
/// absolute-only and pose-graph baselines.
pub fn run_fusion_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    stage("config", cfg.validate())?;
    let g = &cfg.sweep_fusion;
    let mut entries = fusion_grid(&cfg.network, &g.cells, &g.stacked, &g.n_t, &g.r_u, g.iterations);
    if entries.is_empty() {
        return Err(Error::Config("fusion sweep grid is empty".into()));
    }
    if cfg.train_runs == 0 {
        return Err(Error::Config("fusion sweep needs train_runs >= 1".into()));
    }
    if g.control {
        entries.push(SweepEntry {
            config: entries[0].config.clone(),
            iterations: 0,
        });
    }
    let src = source_streams(cfg)?;
    let streams: Vec<PoseStreams> = src
        .runs
        .iter()
        .enumerate()
        .map(|(k, r)| PoseStreams {
            gt: r.gt.clone(),
            abs: src.abs[k].clone(),
            rel: src.rel[k].clone(),
        })
        .collect();
    let (test, train) = streams.split_at(1);
    let mut rows = sweep_fusion(&entries, train, test, &cfg.fusion_train_config());
    if g.baselines {
        rows.push(stage("eval", baseline_row("absolute", &[test[0].abs.clone()], test))?);
        let plan = stage("pgo", plan_chunks(test[0].gt.len(), cfg.pgo.chunk_size, cfg.pgo.overlap))?;
        let refined = stage("pgo", refine_stream(&test[0].abs, &test[0].rel, &cfg.pgo.weights(), &plan))?;
        rows.push(stage("eval", baseline_row("pgo", &[refined], test))?);
        rank_rows(&mut rows);
    }
    Ok(rows)
}
