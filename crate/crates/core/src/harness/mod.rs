//! Experiment orchestration: configuration, the simulate → reconstruct →
//! regress → fuse → evaluate pipeline, parameter sweeps and report files.
//!
//! Every stage is seeded from the experiment seed, so a configuration always
//! produces the same artifacts.

mod sweep;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{CellKind, TrainConfig};
use crate::error::{Error, Result};
use crate::fusion::{build_windows, fuse_stream, train_fusion, FusionConfig, FusionNetwork, FusionWindow};
use crate::geometry::stream::{PoseStream, RelativeStream};
use crate::geometry::{improvement_percent, median_orientation_error, median_position_error, Intrinsics, Pose, RelativePose};
use crate::pgo::{plan_chunks, refine_stream, PgoWeights};
use crate::rpr::{rpr_forward, sim_samples, train_rpr, RprLossWeights, RprNetwork, RprSample};
use crate::sfm::{
    group_matches, label_landmarks, localize_query, reconstruct, write_point_cloud, FloorGrid, PnpParams, Reconstruction,
    SfmConfig, SfmInput,
};
use crate::sim::{generate_scene, observe, pair_matches, simulate_streams, PoseStreams, ScenarioSpec, Scene, IMAGE_HEIGHT, IMAGE_WIDTH};

pub use sweep::{run_fusion_sweep, sweep_sfm, write_sfm_sweep_csv, SfmGrid, SfmSweepRow};

/// Iteration counts of the original training runs.
pub const PAPER_RPR_ITERATIONS: usize = 150_000;
pub const PAPER_FUSION_ITERATIONS: usize = 75_000;

const SCENE_SALT: u64 = 0x5ce_e5a1;
const MATCH_SALT: u64 = 0x3a7c_4e55;
const QUERY_SALT: u64 = 0x9e3_7b1d;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbsoluteSource {
    /// Ground truth degraded by the scenario's noise model.
    Sim,
    /// Query localization against a reconstructed point cloud.
    Sfm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelativeSource {
    Exact,
    /// Regressed from simulated optical flow.
    Rpr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    None,
    Pgo,
    Recurrent,
    All,
}

impl FusionMethod {
    fn pgo(self) -> bool {
        matches!(self, FusionMethod::Pgo | FusionMethod::All)
    }

    fn recurrent(self) -> bool {
        matches!(self, FusionMethod::Recurrent | FusionMethod::All)
    }
}

/// How mapping images are taken from the simulated runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    /// Every `keyframe_stride`-th frame of each run becomes a mapping image.
    pub keyframe_stride: usize,
    /// Image pairs sharing fewer landmarks are not matched.
    pub min_shared: usize,
    /// Floor-grid spacing of the overlap criterion, meters.
    pub floor_step: f64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig {
            keyframe_stride: 23,
            min_shared: 20,
            floor_step: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RprConfig {
    pub beta2: f64,
    /// Mean-pool factor applied to the 640×480 flow.
    pub pool: usize,
    pub units: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
}

impl Default for RprConfig {
    fn default() -> Self {
        RprConfig {
            beta2: 50.0,
            pool: 4,
            units: crate::rpr::UNITS,
            learning_rate: 1e-4,
            batch_size: 50,
            iterations: 5_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgoConfig {
    pub w_abs_p: f64,
    pub w_abs_q: f64,
    pub w_rel_p: f64,
    pub w_rel_q: f64,
    pub chunk_size: usize,
    pub overlap: usize,
}

impl Default for PgoConfig {
    fn default() -> Self {
        let w = PgoWeights::default();
        PgoConfig {
            w_abs_p: w.w_abs_p,
            w_abs_q: w.w_abs_q,
            w_rel_p: w.w_rel_p,
            w_rel_q: w.w_rel_q,
            chunk_size: 100,
            overlap: 20,
        }
    }
}

impl PgoConfig {
    pub fn weights(&self) -> PgoWeights {
        PgoWeights {
            w_abs_p: self.w_abs_p,
            w_abs_q: self.w_abs_q,
            w_rel_p: self.w_rel_p,
            w_rel_q: self.w_rel_q,
        }
    }
}

/// Grid of the recurrent-fusion sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionGrid {
    pub cells: Vec<CellKind>,
    pub stacked: Vec<bool>,
    pub n_t: Vec<usize>,
    pub r_u: Vec<usize>,
    pub iterations: usize,
    /// Adds an untrained copy of the first entry.
    pub control: bool,
    /// Adds absolute-only and pose-graph rows.
    pub baselines: bool,
}

impl Default for FusionGrid {
    fn default() -> Self {
        FusionGrid {
            cells: CellKind::ALL.to_vec(),
            stacked: vec![false, true],
            n_t: crate::fusion::DEFAULT_N_T.to_vec(),
            r_u: crate::fusion::DEFAULT_R_U.to_vec(),
            iterations: 5_000,
            control: true,
            baselines: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Directory receiving every artifact.
    pub out: PathBuf,
    /// TOML file holding the scenario; overrides `[scenario]` when set.
    pub scenario_path: Option<PathBuf>,
    pub scenario: ScenarioSpec,
    pub camera: Intrinsics,
    pub absolute: AbsoluteSource,
    pub relative: RelativeSource,
    pub fusion: FusionMethod,
    /// Runs used for training; the test run is separate.
    pub train_runs: usize,
    /// Weight of the absolute-pose loss term. No absolute regressor is
    /// trained here, so it only documents the loss family.
    pub beta1: f64,
    pub sfm: SfmConfig,
    pub mapping: MappingConfig,
    pub rpr: RprConfig,
    pub network: FusionConfig,
    pub train: TrainConfig,
    pub pgo: PgoConfig,
    pub sweep_sfm: SfmGrid,
    pub sweep_fusion: FusionGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("out"),
            scenario_path: None,
            scenario: ScenarioSpec::default(),
            camera: Intrinsics::default(),
            absolute: AbsoluteSource::Sim,
            relative: RelativeSource::Exact,
            fusion: FusionMethod::All,
            train_runs: 3,
            beta1: 50.0,
            sfm: SfmConfig::default(),
            mapping: MappingConfig::default(),
            rpr: RprConfig::default(),
            network: FusionConfig::default(),
            train: TrainConfig::default(),
            pgo: PgoConfig::default(),
            sweep_sfm: SfmGrid::default(),
            sweep_fusion: FusionGrid::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file, resolving `scenario_path` against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(sp) = &cfg.scenario_path {
            let full = path.parent().unwrap_or(Path::new(".")).join(sp);
            let text = std::fs::read_to_string(&full)
                .map_err(|e| Error::Config(format!("cannot read scenario {}: {e}", full.display())))?;
            cfg.scenario = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.scenario.scene.validate().map_err(cfg)?;
        self.scenario.profile.validate().map_err(cfg)?;
        self.camera.validate().map_err(cfg)?;
        self.sfm.validate()?;
        self.network.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.pgo.weights().validate().map_err(cfg)?;
        plan_chunks(1, self.pgo.chunk_size, self.pgo.overlap).map_err(cfg)?;
        if self.mapping.keyframe_stride == 0 || !(self.mapping.floor_step > 0.0) {
            return Err(Error::Config("keyframe_stride and floor_step must be positive".into()));
        }
        let r = &self.rpr;
        if r.pool == 0 || !IMAGE_WIDTH.is_multiple_of(r.pool) || !IMAGE_HEIGHT.is_multiple_of(r.pool) {
            return Err(Error::Config(format!("rpr pool {} must divide {IMAGE_WIDTH}x{IMAGE_HEIGHT}", r.pool)));
        }
        if r.units == 0 || r.batch_size == 0 || !(r.beta2 > 0.0) || !(r.learning_rate >= 0.0) {
            return Err(Error::Config("rpr units, batch_size, beta2 must be positive".into()));
        }
        if !(self.beta1 > 0.0) {
            return Err(Error::Config("beta1 must be positive".into()));
        }
        let needs_training = self.fusion.recurrent() || self.relative == RelativeSource::Rpr;
        if needs_training && self.train_runs == 0 {
            return Err(Error::Config("training stages need train_runs >= 1".into()));
        }
        Ok(())
    }

    /// Switches both learners to the original iteration counts.
    pub fn use_paper_iterations(&mut self) {
        self.rpr.iterations = PAPER_RPR_ITERATIONS;
        self.train.iterations = PAPER_FUSION_ITERATIONS;
        self.sweep_fusion.iterations = PAPER_FUSION_ITERATIONS;
    }

    pub fn test_seed(&self) -> u64 {
        self.seed
    }

    pub fn train_seeds(&self) -> Vec<u64> {
        (1..=self.train_runs as u64).map(|k| self.seed.wrapping_add(k)).collect()
    }

    pub fn fusion_train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.train.seed ^ self.seed,
            ..self.train.clone()
        }
    }
}

/// Simulated test run followed by the training runs.
pub fn simulate_runs(cfg: &ExperimentConfig) -> Result<Vec<PoseStreams>> {
    std::iter::once(cfg.test_seed())
        .chain(cfg.train_seeds())
        .map(|s| simulate_streams(&cfg.scenario, s))
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("simulate"))
}

pub fn scene_for(cfg: &ExperimentConfig) -> Result<Scene> {
    generate_scene(&cfg.scenario.scene, cfg.seed ^ SCENE_SALT)
}

/// Mapping images: keyframes of every run, in run order.
pub fn keyframes(cfg: &ExperimentConfig, runs: &[PoseStreams]) -> Vec<Pose> {
    runs.iter()
        .flat_map(|r| r.gt.iter().step_by(cfg.mapping.keyframe_stride).copied())
        .collect()
}

/// A reconstructed map plus the absolute stream it yields for each run.
#[derive(Clone, Debug)]
pub struct SfmOutcome {
    pub reconstruction: Reconstruction,
    pub streams: Vec<Vec<Pose>>,
    pub localized: usize,
    pub failed: usize,
}

fn matches_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seed ^ MATCH_SALT
}

/// Match input for the keyframes of `runs`, with the keyframe ground truth
/// as priors.
pub fn sfm_input(cfg: &ExperimentConfig, scene: &Scene, runs: &[PoseStreams]) -> Result<SfmInput> {
    let keys = keyframes(cfg, runs);
    let n = &cfg.scenario.noise;
    let pm = pair_matches(
        scene,
        &keys,
        &cfg.camera,
        n.match_sigma_px,
        n.match_outlier_rate,
        cfg.mapping.min_shared,
        matches_seed(cfg),
    )?;
    let spec = &cfg.scenario.scene;
    Ok(SfmInput {
        n_images: keys.len(),
        pairs: group_matches(&pm),
        intrinsics: cfg.camera,
        image_size: (IMAGE_WIDTH, IMAGE_HEIGHT),
        priors: Some(keys),
        floor: Some(FloorGrid {
            min: [spec.min[0], spec.min[1]],
            max: [spec.max[0], spec.max[1]],
            step: cfg.mapping.floor_step,
            height: spec.min[2],
        }),
    })
}

/// Noisy query correspondences of one frame, labeled with cloud ids.
fn query_correspondences(
    cfg: &ExperimentConfig,
    scene: &Scene,
    labels: &BTreeMap<usize, usize>,
    pose: &Pose,
    seed: u64,
) -> Vec<(usize, Vector2<f64>)> {
    let n = &cfg.scenario.noise;
    let obs = observe(scene, std::slice::from_ref(pose), &cfg.camera, n.match_sigma_px, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    obs[0]
        .iter()
        .filter_map(|(sim_id, px)| {
            let id = *labels.get(sim_id)?;
            if n.match_outlier_rate > 0.0 && rng.random_bool(n.match_outlier_rate) {
                let w = IMAGE_WIDTH as f64;
                let h = IMAGE_HEIGHT as f64;
                return Some((id, Vector2::new(rng.random_range(0.0..w), rng.random_range(0.0..h))));
            }
            Some((id, *px))
        })
        .collect()
}

/// Frames whose localization fails hold the previous pose (the next one at
/// the start of a run).
fn fill_failures(poses: Vec<Option<Pose>>) -> Result<Vec<Pose>> {
    let first = poses
        .iter()
        .flatten()
        .next()
        .copied()
        .ok_or_else(|| Error::LocalizationFailed("no frame of the run could be localized".into()))?;
    let mut last = first;
    Ok(poses
        .into_iter()
        .map(|p| {
            if let Some(p) = p {
                last = p;
            }
            last
        })
        .collect())
}

/// Reconstructs the scene from keyframes of all runs and localizes every
/// frame of every run against it.
pub fn sfm_stage(cfg: &ExperimentConfig, sfm: &SfmConfig, runs: &[PoseStreams]) -> Result<SfmOutcome> {
    let scene = scene_for(cfg)?;
    let input = sfm_input(cfg, &scene, runs)?;
    sfm_stage_from(cfg, sfm, runs, &scene, &input)
}

/// As [`sfm_stage`], reconstructing from a prepared input (for instance
/// with matches read from a file). Query frames are still labeled through
/// the simulated keyframe observations.
pub fn sfm_stage_from(
    cfg: &ExperimentConfig,
    sfm: &SfmConfig,
    runs: &[PoseStreams],
    scene: &Scene,
    input: &SfmInput,
) -> Result<SfmOutcome> {
    let reconstruction = reconstruct(input, sfm, cfg.seed)?;
    let n = &cfg.scenario.noise;
    let key_obs = observe(scene, input.priors.as_deref().unwrap_or(&[]), &cfg.camera, n.match_sigma_px, matches_seed(cfg));
    let labels = label_landmarks(&reconstruction.cloud, &reconstruction.tracks, &key_obs);
    let mut streams = Vec::with_capacity(runs.len());
    let (mut localized, mut failed) = (0, 0);
    for (r, run) in runs.iter().enumerate() {
        let poses: Vec<Option<Pose>> = crate::par::map_range(run.gt.len(), |j| {
            let seed = cfg.seed ^ QUERY_SALT ^ ((r as u64) << 32 | j as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let corr = query_correspondences(cfg, scene, &labels, &run.gt[j], seed);
            let params = PnpParams {
                threshold_px: sfm.ex_loc(),
                seed,
                ..PnpParams::default()
            };
            localize_query(&reconstruction.cloud, &corr, &cfg.camera, &params).ok().map(|r| r.pose)
        });
        let ok = poses.iter().filter(|p| p.is_some()).count();
        localized += ok;
        failed += poses.len() - ok;
        streams.push(fill_failures(poses)?);
    }
    if failed > 0 {
        log::warn!("{failed} of {} query frames could not be localized", localized + failed);
    }
    Ok(SfmOutcome {
        reconstruction,
        streams,
        localized,
        failed,
    })
}

pub fn rpr_samples(cfg: &ExperimentConfig, gt: &[Pose]) -> Result<Vec<RprSample>> {
    sim_samples(&cfg.scenario.scene, gt, &cfg.camera, cfg.rpr.pool)
}

/// Trains the relative pose regressor on the training runs.
pub fn train_rpr_stage(cfg: &ExperimentConfig, train: &[PoseStreams]) -> Result<(RprNetwork, Vec<f64>)> {
    let mut samples = Vec::new();
    for run in train {
        samples.extend(rpr_samples(cfg, &run.gt)?);
    }
    let mut net = RprNetwork::new(IMAGE_HEIGHT / cfg.rpr.pool, IMAGE_WIDTH / cfg.rpr.pool, cfg.rpr.units, cfg.seed)?;
    let tc = TrainConfig {
        learning_rate: cfg.rpr.learning_rate,
        batch_size: cfg.rpr.batch_size,
        iterations: cfg.rpr.iterations,
        seed: cfg.seed,
    };
    let losses = train_rpr(&mut net, &samples, &RprLossWeights { beta2: cfg.rpr.beta2 }, &tc)?;
    Ok((net, losses))
}

pub fn predict_relative(cfg: &ExperimentConfig, net: &RprNetwork, gt: &[Pose]) -> Result<Vec<RelativePose>> {
    let samples = rpr_samples(cfg, gt)?;
    crate::par::map_slice(&samples, |s| rpr_forward(net, &s.flow).map(|o| o.rel))
        .into_iter()
        .collect()
}

/// Training windows from `(abs, rel, gt)` triples.
pub fn fusion_windows(n_t: usize, runs: &[(Vec<Pose>, Vec<RelativePose>, Vec<Pose>)]) -> Result<Vec<FusionWindow>> {
    let mut out = Vec::new();
    for (abs, rel, gt) in runs {
        out.extend(build_windows(abs, rel, n_t, Some(gt))?);
    }
    Ok(out)
}

pub fn train_fusion_stage(
    cfg: &ExperimentConfig,
    runs: &[(Vec<Pose>, Vec<RelativePose>, Vec<Pose>)],
) -> Result<(FusionNetwork, Vec<f64>)> {
    let windows = fusion_windows(cfg.network.n_t, runs)?;
    let mut net = FusionNetwork::new(cfg.network.clone(), cfg.seed)?;
    let losses = train_fusion(&mut net, &windows, &cfg.fusion_train_config())?;
    Ok((net, losses))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub median_pos_m: f64,
    pub median_ori_deg: f64,
    pub improvement_pct: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    /// Adds a row for `pred`; improvement is relative to the first row.
    pub fn push(&mut self, method: &str, pred: &[Pose], gt: &[Pose]) -> Result<()> {
        let pos = median_position_error(pred, gt)?;
        let ori = median_orientation_error(pred, gt)?;
        let base = self.rows.first().map_or(pos, |r| r.median_pos_m);
        let improvement_pct = if base > 0.0 { improvement_percent(base, pos)? } else { 0.0 };
        self.rows.push(ReportRow {
            method: method.to_string(),
            median_pos_m: pos,
            median_ori_deg: ori,
            improvement_pct,
        });
        Ok(())
    }

    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let rows = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Report { rows })
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => other.in_stage(name),
    })
}

pub fn write_streams(dir: &Path, name: &str, rate: f64, abs: &[Pose], rel: Option<&[RelativePose]>) -> Result<()> {
    let s = PoseStream::uniform(abs.to_vec(), rate);
    s.write(dir.join(format!("{name}.csv")))?;
    if let Some(rel) = rel {
        let t: Vec<f64> = s.t.iter().skip(1).copied().collect();
        RelativeStream { t, rel: rel.to_vec() }.write(dir.join(format!("{name}_relative.csv")))?;
    }
    Ok(())
}

/// Absolute and relative streams per run, from the configured sources.
pub struct SourceStreams {
    pub runs: Vec<PoseStreams>,
    pub abs: Vec<Vec<Pose>>,
    pub rel: Vec<Vec<RelativePose>>,
    pub sfm: Option<SfmOutcome>,
    pub rpr: Option<(RprNetwork, Vec<f64>)>,
}

pub fn source_streams(cfg: &ExperimentConfig) -> Result<SourceStreams> {
    let runs = simulate_runs(cfg)?;
    let (abs, sfm) = match cfg.absolute {
        AbsoluteSource::Sim => (runs.iter().map(|r| r.abs.clone()).collect(), None),
        AbsoluteSource::Sfm => {
            log::info!("reconstructing and localizing {} runs", runs.len());
            let o = stage("sfm", sfm_stage(cfg, &cfg.sfm, &runs))?;
            (o.streams.clone(), Some(o))
        }
    };
    let (rel, rpr) = match cfg.relative {
        RelativeSource::Exact => (runs.iter().map(|r| r.rel.clone()).collect(), None),
        RelativeSource::Rpr => {
            log::info!("training the relative pose regressor for {} iterations", cfg.rpr.iterations);
            let (net, losses) = stage("rpr", train_rpr_stage(cfg, &runs[1..]))?;
            let rel = stage("rpr", runs.iter().map(|r| predict_relative(cfg, &net, &r.gt)).collect::<Result<Vec<_>>>())?;
            (rel, Some((net, losses)))
        }
    };
    Ok(SourceStreams { runs, abs, rel, sfm, rpr })
}

pub fn write_losses(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the configured combination and writes streams, checkpoints and
/// `report.csv` under `cfg.out`. The report always starts with the
/// absolute-only row.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Report> {
    stage("config", cfg.validate())?;
    let out = cfg.out.as_path();
    stage("io", std::fs::create_dir_all(out).map_err(Error::from))?;
    let src = source_streams(cfg)?;
    let rate = cfg.scenario.rate;
    let test = &src.runs[0];

    let io = |r: Result<()>| stage("io", r);
    io(write_streams(out, "gt", rate, &test.gt, None))?;
    io(write_streams(out, "absolute", rate, &src.abs[0], Some(&src.rel[0])))?;
    if let Some(o) = &src.sfm {
        io(write_point_cloud(out.join("pointcloud.csv"), &o.reconstruction.cloud))?;
    }
    if let Some((net, losses)) = &src.rpr {
        io(net.save(out.join("rpr.ckpt")))?;
        io(write_losses(out.join("rpr_loss.csv"), losses))?;
    }

    let mut report = Report::default();
    stage("eval", report.push("absolute", &src.abs[0], &test.gt))?;

    if cfg.fusion.pgo() {
        log::info!("refining {} poses with pose-graph optimization", test.gt.len());
        let plan = stage("pgo", plan_chunks(test.gt.len(), cfg.pgo.chunk_size, cfg.pgo.overlap))?;
        let refined = stage("pgo", refine_stream(&src.abs[0], &src.rel[0], &cfg.pgo.weights(), &plan))?;
        io(write_streams(out, "pgo", rate, &refined, None))?;
        stage("eval", report.push("pgo", &refined, &test.gt))?;
    }

    if cfg.fusion.recurrent() {
        log::info!("training the {} fusion network for {} iterations", cfg.network.cell, cfg.train.iterations);
        let train: Vec<_> = (1..src.runs.len())
            .map(|k| (src.abs[k].clone(), src.rel[k].clone(), src.runs[k].gt.clone()))
            .collect();
        let (net, losses) = stage("fusion", train_fusion_stage(cfg, &train))?;
        io(net.save(out.join("fusion.ckpt")))?;
        io(write_losses(out.join("fusion_loss.csv"), &losses))?;
        let fused = stage("fusion", fuse_stream(&net, &src.abs[0], &src.rel[0]))?;
        io(write_streams(out, "fusion", rate, &fused, None))?;
        stage("eval", report.push("recurrent", &fused, &test.gt))?;
    }

    io(report.write_csv(out.join("report.csv")))?;
    Ok(report)
}
