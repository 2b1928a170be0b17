//! Miniature structure from motion over pairwise feature matches.
//!
//! `reconstruct` filters matches, links them into tracks, initializes from
//! the best two-view geometry, registers the remaining images by PnP, then
//! alternates cluster separation, leave-one-out exclusion and bundle
//! adjustment with fixed rotations before a final full adjustment. Query
//! images are localized against the resulting cloud with `localize_query`.

mod align;
mod ba;
mod filter;
mod io;
mod pnp;
mod tracks;
mod twoview;

pub use align::{umeyama, Similarity};
pub use ba::{bundle_adjust, BaResult, BaStage};
pub use filter::{overlap_criterion, overlap_fraction, spatial_consistency_filter, FloorGrid};
pub use io::{read_matches, read_point_cloud, write_matches, write_point_cloud};
pub use pnp::{solve_pnp, PnpParams, PnpResult};
pub use tracks::{build_tracks, cluster_separation, gibbs_exclude, track_residuals, two_means};

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, Vec3};
use crate::sim::PairMatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfmConfig {
    /// Spatial-consistency radius in pixels; 0 disables the filter.
    pub sc: f64,
    /// Required floor-grid overlap between matched images, percent.
    pub oc: f64,
    /// Minimum observations a split track must keep.
    pub mm: usize,
    /// Residual spread in pixels above which a track is split.
    pub ex: f64,
    pub gibbs: bool,
    /// Residual cut for bundle adjustment, in multiples of the RMS residual.
    pub std: f64,
    /// Stop threshold of the exclusion loop (max residual, pixels); `ex` when unset.
    pub ex_ba: Option<f64>,
    /// Inlier threshold of query localization (pixels); `ex` when unset.
    pub ex_loc: Option<f64>,
    /// Inlier threshold used when registering images during reconstruction.
    pub register_px: f64,
    pub max_rounds: usize,
}

impl Default for SfmConfig {
    fn default() -> Self {
        SfmConfig {
            sc: 0.0,
            oc: 0.0,
            mm: 3,
            ex: 2.0,
            gibbs: true,
            std: 3.0,
            ex_ba: None,
            ex_loc: None,
            register_px: 4.0,
            max_rounds: 10,
        }
    }
}

impl SfmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.sc >= 0.0) {
            return bad("sc must be >= 0");
        }
        if !(0.0..=100.0).contains(&self.oc) {
            return bad("oc must be in [0, 100]");
        }
        if self.mm < 2 {
            return bad("mm must be >= 2");
        }
        if !(self.ex > 0.0) {
            return bad("ex must be > 0");
        }
        if !(self.std > 0.0) {
            return bad("std must be > 0");
        }
        if self.ex_ba.is_some_and(|v| !(v > 0.0)) || self.ex_loc.is_some_and(|v| !(v > 0.0)) {
            return bad("ex_ba and ex_loc must be > 0");
        }
        if !(self.register_px > 0.0) {
            return bad("register_px must be > 0");
        }
        Ok(())
    }

    pub fn ex_ba(&self) -> f64 {
        self.ex_ba.unwrap_or(self.ex)
    }

    pub fn ex_loc(&self) -> f64 {
        self.ex_loc.unwrap_or(self.ex)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub image: usize,
    pub px: Vector2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrack {
    pub landmark: usize,
    pub observations: Vec<Observation>,
    pub match_count: usize,
}

impl FeatureTrack {
    pub fn validate(&self) -> Result<()> {
        if self.observations.len() < 2 {
            return Err(Error::invalid(format!("track {} has fewer than two observations", self.landmark)));
        }
        let images: BTreeSet<usize> = self.observations.iter().map(|o| o.image).collect();
        if images.len() != self.observations.len() {
            return Err(Error::invalid(format!("track {} observes an image twice", self.landmark)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairMatches {
    pub img_a: usize,
    pub img_b: usize,
    pub matches: Vec<(Vector2<f64>, Vector2<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub landmarks: BTreeMap<usize, Vec3>,
    pub cameras: BTreeMap<usize, Pose>,
    pub intrinsics: Intrinsics,
}

/// Groups simulator matches by image pair, keeping first-appearance order.
pub fn group_matches(matches: &[PairMatch]) -> Vec<PairMatches> {
    let mut out: Vec<PairMatches> = Vec::new();
    let mut index: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for m in matches {
        let k = *index.entry((m.img_a, m.img_b)).or_insert_with(|| {
            out.push(PairMatches {
                img_a: m.img_a,
                img_b: m.img_b,
                matches: Vec::new(),
            });
            out.len() - 1
        });
        out[k].matches.push((m.m.a, m.m.b));
    }
    out
}

/// Maps external point labels onto cloud landmarks. `labels[image]` lists
/// `(label, pixel)`; a track takes the label most of its observations carry
/// (ties to the smaller label), and a label claimed by several tracks goes to
/// the one with the most supporting observations.
pub fn label_landmarks(
    cloud: &PointCloud,
    tracks: &[FeatureTrack],
    labels: &[Vec<(usize, Vector2<f64>)>],
) -> BTreeMap<usize, usize> {
    let key = |image: usize, px: &Vector2<f64>| (image, px.x.to_bits(), px.y.to_bits());
    let mut by_px: BTreeMap<(usize, u64, u64), usize> = BTreeMap::new();
    for (image, list) in labels.iter().enumerate() {
        for (label, px) in list {
            by_px.insert(key(image, px), *label);
        }
    }
    let mut best: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for t in tracks {
        if !cloud.landmarks.contains_key(&t.landmark) {
            continue;
        }
        let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
        for o in &t.observations {
            if let Some(l) = by_px.get(&key(o.image, &o.px)) {
                *votes.entry(*l).or_default() += 1;
            }
        }
        let Some((label, count)) = votes.into_iter().fold(None, |acc: Option<(usize, usize)>, (l, c)| match acc {
            Some((_, bc)) if bc >= c => acc,
            _ => Some((l, c)),
        }) else {
            continue;
        };
        match best.get(&label) {
            Some((_, c)) if *c >= count => {}
            _ => {
                best.insert(label, (t.landmark, count));
            }
        }
    }
    best.into_iter().map(|(l, (id, _))| (l, id)).collect()
}

/// Camera pose of a query image from `(landmark id, pixel)` pairs. Ids
/// missing from the cloud are skipped.
pub fn localize_query(
    cloud: &PointCloud,
    correspondences: &[(usize, Vector2<f64>)],
    intrinsics: &Intrinsics,
    params: &PnpParams,
) -> Result<PnpResult> {
    let (pts, px): (Vec<Vec3>, Vec<Vector2<f64>>) = correspondences
        .iter()
        .filter_map(|(id, uv)| cloud.landmarks.get(id).map(|x| (*x, *uv)))
        .unzip();
    solve_pnp(&pts, &px, intrinsics, params)
}

/// Everything `reconstruct` consumes.
#[derive(Clone, Debug)]
pub struct SfmInput {
    pub n_images: usize,
    pub pairs: Vec<PairMatches>,
    pub intrinsics: Intrinsics,
    /// Image width and height in pixels.
    pub image_size: (usize, usize),
    /// Approximate image poses: required by the overlap criterion and used
    /// to place the result in their frame.
    pub priors: Option<Vec<Pose>>,
    pub floor: Option<FloorGrid>,
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub cloud: PointCloud,
    pub tracks: Vec<FeatureTrack>,
    pub rms: f64,
    /// Cost trace of the final adjustment.
    pub cost_trace: Vec<f64>,
    /// Exclusion rounds run before the final adjustment.
    pub rounds: usize,
    /// Observations used by the final adjustment.
    pub observations: usize,
    pub alignment: Option<Similarity>,
}

const MIN_INIT_INLIERS: usize = 8;
const MIN_REGISTER: usize = 6;
const MIN_PARALLAX_DEG: f64 = 1.0;

fn reprojects(cloud: &PointCloud, x: &Vec3, o: &Observation, tol: f64) -> bool {
    let Some(cam) = cloud.cameras.get(&o.image) else { return false };
    cloud
        .intrinsics
        .project(&cam.world_to_camera(x))
        .is_some_and(|uv| (uv - o.px).norm() < tol)
}

/// Largest angle between viewing rays of `x` from the given cameras.
fn parallax_deg(cloud: &PointCloud, x: &Vec3, obs: &[Observation]) -> f64 {
    let dirs: Vec<Vec3> = obs
        .iter()
        .filter_map(|o| cloud.cameras.get(&o.image).map(|c| (x - c.p).normalize()))
        .collect();
    let mut best: f64 = 0.0;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            best = best.max(dirs[i].dot(&dirs[j]).clamp(-1.0, 1.0).acos().to_degrees());
        }
    }
    best
}

/// Triangulates every track without a landmark that has two registered
/// observations, keeping points that reproject within `tol` everywhere.
fn triangulate_new(cloud: &mut PointCloud, tracks: &[FeatureTrack], tol: f64) {
    for t in tracks {
        if cloud.landmarks.contains_key(&t.landmark) {
            continue;
        }
        let obs: Vec<Observation> = t.observations.iter().filter(|o| cloud.cameras.contains_key(&o.image)).copied().collect();
        if obs.len() < 2 {
            continue;
        }
        let Some(x) = tracks::fit_landmark(cloud, &obs, None) else { continue };
        if obs.iter().all(|o| reprojects(cloud, &x, o, tol)) && parallax_deg(cloud, &x, &obs) >= MIN_PARALLAX_DEG {
            cloud.landmarks.insert(t.landmark, x);
        }
    }
}

/// Drops landmarks left with fewer than two usable observations and cameras
/// left with fewer than three, until both conditions hold.
fn prune(cloud: &mut PointCloud, tracks: &[FeatureTrack]) {
    let ids: BTreeMap<usize, &FeatureTrack> = tracks.iter().map(|t| (t.landmark, t)).collect();
    loop {
        let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
        let before = cloud.landmarks.len();
        cloud.landmarks.retain(|id, x| {
            let Some(t) = ids.get(id) else { return false };
            let usable: Vec<usize> = t
                .observations
                .iter()
                .filter(|o| {
                    cloud.cameras.get(&o.image).is_some_and(|c| cloud.intrinsics.project(&c.world_to_camera(x)).is_some())
                })
                .map(|o| o.image)
                .collect();
            if usable.len() < 2 {
                return false;
            }
            for i in usable {
                *seen.entry(i).or_default() += 1;
            }
            true
        });
        let cams = cloud.cameras.len();
        cloud.cameras.retain(|id, _| seen.get(id).copied().unwrap_or(0) >= 3);
        if cloud.cameras.len() == cams && cloud.landmarks.len() == before {
            break;
        }
        if cloud.cameras.len() != cams {
            log::debug!("pruned {} weakly observed cameras", cams - cloud.cameras.len());
        }
    }
}

fn adjust(cloud: &mut PointCloud, tracks: &[FeatureTrack], stage: BaStage, std: f64) -> Result<BaResult> {
    prune(cloud, tracks);
    let res = bundle_adjust(cloud, tracks, stage, std)?;
    *cloud = res.cloud.clone();
    Ok(res)
}

/// Two-view initialization on the pair sharing the most tracks that yields
/// a valid relative pose.
fn initialize(input: &SfmInput, tracks: &[FeatureTrack], rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let mut shared: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (ti, t) in tracks.iter().enumerate() {
        for i in 0..t.observations.len() {
            for j in i + 1..t.observations.len() {
                shared.entry((t.observations[i].image, t.observations[j].image)).or_default().push(ti);
            }
        }
    }
    let mut candidates: Vec<((usize, usize), Vec<usize>)> = shared.into_iter().collect();
    candidates.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    let intr = input.intrinsics;
    let thresh = 1.0 / intr.fx.max(intr.fy);
    for ((ia, ib), tis) in candidates.into_iter().take(20) {
        if tis.len() < MIN_INIT_INLIERS {
            break;
        }
        let obs_in = |t: &FeatureTrack, img: usize| t.observations.iter().find(|o| o.image == img).unwrap().px;
        let xa: Vec<Vec3> = tis.iter().map(|k| intr.unproject(&obs_in(&tracks[*k], ia))).collect();
        let xb: Vec<Vec3> = tis.iter().map(|k| intr.unproject(&obs_in(&tracks[*k], ib))).collect();
        let Some((e, mask)) = twoview::essential_ransac(&xa, &xb, thresh, 500, rng) else { continue };
        let Some((pose_b, front)) = twoview::relative_from_essential(&e, &xa, &xb, &mask) else { continue };
        if front < MIN_INIT_INLIERS {
            continue;
        }
        let mut cloud = PointCloud {
            landmarks: BTreeMap::new(),
            cameras: BTreeMap::from([(ia, Pose::IDENTITY), (ib, pose_b)]),
            intrinsics: intr,
        };
        let sub: Vec<FeatureTrack> = tis
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(k, _)| tracks[*k].clone())
            .collect();
        triangulate_new(&mut cloud, &sub, f64::INFINITY);
        let kept: Vec<f64> = sub
            .iter()
            .filter_map(|t| cloud.landmarks.get(&t.landmark).map(|x| parallax_deg(&cloud, x, &t.observations)))
            .collect();
        if kept.len() >= MIN_INIT_INLIERS {
            log::debug!("initialized on images {ia} and {ib} with {} points", kept.len());
            return Ok(cloud);
        }
    }
    Err(Error::InsufficientMatches("no image pair gives a usable two-view geometry".into()))
}

/// Full reconstruction; deterministic for a given `seed`. Images are
/// registered one at a time, with a global adjustment whenever the
/// registered set has grown by a fifth.
pub fn reconstruct(input: &SfmInput, config: &SfmConfig, seed: u64) -> Result<Reconstruction> {
    config.validate()?;
    if input.n_images < 2 {
        return Err(Error::invalid("reconstruction needs at least two images"));
    }
    input.intrinsics.validate()?;
    if let Some(p) = &input.priors {
        if p.len() != input.n_images {
            return Err(Error::LengthMismatch {
                expected: input.n_images,
                got: p.len(),
            });
        }
    }
    for pm in &input.pairs {
        if pm.img_a >= input.n_images || pm.img_b >= input.n_images || pm.img_a == pm.img_b {
            return Err(Error::invalid(format!("bad image pair ({}, {})", pm.img_a, pm.img_b)));
        }
    }

    let admitted: Option<BTreeSet<(usize, usize)>> = if config.oc > 0.0 {
        let (Some(priors), Some(floor)) = (&input.priors, &input.floor) else {
            return Err(Error::Config("oc > 0 needs image priors and a floor grid".into()));
        };
        Some(overlap_criterion(priors, &input.intrinsics, input.image_size, floor, config.oc)?.into_iter().collect())
    } else {
        None
    };
    let pairs: Vec<PairMatches> = input
        .pairs
        .iter()
        .filter(|pm| {
            admitted
                .as_ref()
                .is_none_or(|a| a.contains(&(pm.img_a.min(pm.img_b), pm.img_a.max(pm.img_b))))
        })
        .map(|pm| PairMatches {
            img_a: pm.img_a,
            img_b: pm.img_b,
            matches: spatial_consistency_filter(&pm.matches, config.sc),
        })
        .filter(|pm| !pm.matches.is_empty())
        .collect();
    let total: usize = pairs.iter().map(|p| p.matches.len()).sum();
    if total < MIN_INIT_INLIERS {
        return Err(Error::InsufficientMatches(format!("{total} matches survive filtering")));
    }

    let mut tracks = build_tracks(&pairs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = initialize(input, &tracks, &mut rng)?;
    adjust(&mut cloud, &tracks, BaStage::RotationsFixed, config.std)?;

    let mut failed: BTreeSet<usize> = BTreeSet::new();
    let mut adjusted_at = cloud.cameras.len();
    loop {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for t in &tracks {
            if cloud.landmarks.contains_key(&t.landmark) {
                for o in &t.observations {
                    if !cloud.cameras.contains_key(&o.image) && !failed.contains(&o.image) {
                        *counts.entry(o.image).or_default() += 1;
                    }
                }
            }
        }
        let Some((&image, &count)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else { break };
        if count < MIN_REGISTER {
            break;
        }
        let (pts, px): (Vec<Vec3>, Vec<Vector2<f64>>) = tracks
            .iter()
            .filter_map(|t| {
                let x = cloud.landmarks.get(&t.landmark)?;
                t.observations.iter().find(|o| o.image == image).map(|o| (*x, o.px))
            })
            .unzip();
        let params = PnpParams {
            threshold_px: config.register_px,
            seed: seed ^ (image as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            ..PnpParams::default()
        };
        match solve_pnp(&pts, &px, &input.intrinsics, &params) {
            Ok(r) if r.inliers.iter().filter(|b| **b).count() >= MIN_REGISTER => {
                cloud.cameras.insert(image, r.pose);
                triangulate_new(&mut cloud, &tracks, config.register_px);
                if 5 * cloud.cameras.len() >= 6 * adjusted_at {
                    adjust(&mut cloud, &tracks, BaStage::RotationsFixed, config.std)?;
                    adjusted_at = cloud.cameras.len();
                }
            }
            _ => {
                log::warn!("image {image} could not be registered");
                failed.insert(image);
            }
        }
    }

    if adjusted_at != cloud.cameras.len() {
        adjust(&mut cloud, &tracks, BaStage::RotationsFixed, config.std)?;
    }

    let mut next_id = tracks.iter().map(|t| t.landmark + 1).max().unwrap_or(0);
    let mut rounds = 0;
    while rounds < config.max_rounds {
        let mut worst: f64 = 0.0;
        for t in &tracks {
            for r in track_residuals(&cloud, t).into_iter().flatten() {
                worst = worst.max(r.norm());
            }
        }
        if worst < config.ex_ba() {
            break;
        }
        rounds += 1;
        let mut next = Vec::with_capacity(tracks.len());
        for t in &tracks {
            if !cloud.landmarks.contains_key(&t.landmark) {
                next.push(t.clone());
                continue;
            }
            let res = track_residuals(&cloud, t);
            let (obs, resid): (Vec<Observation>, Vec<Vector2<f64>>) =
                t.observations.iter().zip(&res).filter_map(|(o, r)| r.map(|r| (*o, r))).unzip();
            let usable = FeatureTrack {
                landmark: t.landmark,
                observations: obs,
                match_count: t.match_count,
            };
            for part in cluster_separation(&usable, &resid, config.mm, config.ex, &mut next_id)? {
                let part = gibbs_exclude(&cloud, &part, config.gibbs, config.mm, seed ^ rounds as u64);
                if part.landmark != t.landmark {
                    let x0 = cloud.landmarks.get(&t.landmark).copied();
                    match tracks::fit_landmark(&cloud, &part.observations, x0) {
                        Some(x) => {
                            cloud.landmarks.insert(part.landmark, x);
                        }
                        None => continue,
                    }
                }
                next.push(part);
            }
            if !next.iter().rev().any(|n: &FeatureTrack| n.landmark == t.landmark) {
                cloud.landmarks.remove(&t.landmark);
            }
        }
        tracks = next;
        adjust(&mut cloud, &tracks, BaStage::RotationsFixed, config.std)?;
    }

    let fin = adjust(&mut cloud, &tracks, BaStage::Final, config.std)?;
    let observations = fin.excluded.iter().flatten().filter(|e| !**e).count();
    let mut alignment = None;
    if let Some(priors) = &input.priors {
        let (src, dst): (Vec<Vec3>, Vec<Vec3>) = cloud.cameras.iter().map(|(i, c)| (c.p, priors[*i].p)).unzip();
        match umeyama(&src, &dst) {
            Ok(s) => {
                cloud = s.apply_cloud(&cloud);
                alignment = Some(s);
            }
            Err(e) => log::warn!("cloud left in its own frame: {e}"),
        }
    }
    tracks.retain(|t| cloud.landmarks.contains_key(&t.landmark));
    Ok(Reconstruction {
        cloud,
        tracks,
        rms: fin.rms,
        cost_trace: fin.cost_trace,
        rounds,
        observations,
        alignment,
    })
}
