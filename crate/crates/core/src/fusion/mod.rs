//! Recurrent fusion of an absolute and a relative pose stream.
//!
//! A window holds `n_t` consecutive timesteps, each the absolute pose (7)
//! followed by the relative pose that arrived at that timestep (7). One cell,
//! or two stacked cells, read the window and two affine heads map the final
//! hidden state to a position (3) and a quaternion (4).
//!
//! With [`NormMode::Anchor`] every window is first expressed in the frame of
//! its last absolute pose and standardized, and the heads predict a
//! correction to that anchor. [`NormMode::None`] feeds the raw features and
//! reads the heads as the pose itself.

mod sweep;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::checkpoint::{Checkpoint, Header, ModelTag};
use crate::cells::{train_minibatch, CellKind, CellStack, Linear, Mat, TrainConfig, Trainable};
use crate::error::{Error, Result};
use crate::geometry::{Mat3, Pose, Quat, RelativePose, Vec3};
use crate::par;

pub use sweep::{
    baseline_row, fusion_grid, rank_rows, sweep_fusion, write_sweep_csv, SweepEntry, SweepRow,
    DEFAULT_N_T, DEFAULT_R_U,
};

/// Width of one window row.
pub const FEATURES: usize = 14;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    None,
    #[default]
    Anchor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub cell: CellKind,
    pub n_t: usize,
    pub r_u: usize,
    pub stacked: bool,
    pub beta3: f64,
    pub batch_size: usize,
    pub normalization: NormMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            cell: CellKind::Trnn,
            n_t: 15,
            r_u: 10,
            stacked: true,
            beta3: 50.0,
            batch_size: 100,
            normalization: NormMode::Anchor,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 || self.r_u == 0 {
            return Err(Error::invalid("n_t and r_u must be >= 1"));
        }
        if !(self.beta3 > 0.0) || !self.beta3.is_finite() {
            return Err(Error::invalid("beta3 must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionWindow {
    /// `n_t × 14` rows of `[abs ‖ rel]`.
    pub features: Mat,
    /// Ground truth at the last timestep, when training.
    pub target: Option<Pose>,
}

/// Sliding windows (stride 1) over aligned streams.
///
/// `rel[i]` is the delta from pose `i` to pose `i + 1`, so it is the one that
/// arrives at timestep `i + 1`; timestep 0 gets the identity.
pub fn build_windows(abs: &[Pose], rel: &[RelativePose], n_t: usize, gt: Option<&[Pose]>) -> Result<Vec<FusionWindow>> {
    if n_t == 0 {
        return Err(Error::invalid("n_t must be >= 1"));
    }
    if abs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if rel.len() + 1 != abs.len() {
        return Err(Error::LengthMismatch {
            expected: abs.len() - 1,
            got: rel.len(),
        });
    }
    if let Some(g) = gt {
        if g.len() != abs.len() {
            return Err(Error::LengthMismatch {
                expected: abs.len(),
                got: g.len(),
            });
        }
    }
    if abs.len() < n_t {
        return Err(Error::invalid(format!("stream of {} poses is shorter than n_t = {n_t}", abs.len())));
    }
    let rows: Vec<f64> = abs
        .iter()
        .enumerate()
        .flat_map(|(i, a)| {
            let r = if i == 0 { RelativePose::IDENTITY } else { rel[i - 1] };
            a.to_array().into_iter().chain(r.to_array())
        })
        .collect();
    Ok((0..=abs.len() - n_t)
        .map(|s| FusionWindow {
            features: Mat::from_vec(n_t, FEATURES, rows[s * FEATURES..(s + n_t) * FEATURES].to_vec()).unwrap(),
            target: gt.map(|g| g[s + n_t - 1]),
        })
        .collect())
}

/// `‖p̂ − p‖² + β ‖q̂ − q/‖q‖‖²` with `q̂` taken as given.
pub fn fusion_loss(pred: &Pose, gt: &Pose, beta: f64) -> Result<f64> {
    Ok(loss_and_grad(pred, gt, beta)?.0)
}

fn loss_and_grad(pred: &Pose, gt: &Pose, beta: f64) -> Result<(f64, Vec3, Quat)> {
    let n = gt.q.norm();
    if !(n > 0.0) {
        return Err(Error::DegenerateQuaternion);
    }
    let ep = pred.p - gt.p;
    let eq = Quat::new(pred.q.w - gt.q.w / n, pred.q.x - gt.q.x / n, pred.q.y - gt.q.y / n, pred.q.z - gt.q.z / n);
    Ok((ep.norm_squared() + beta * eq.dot(eq), 2.0 * ep, eq.scale(2.0 * beta)))
}

/// Frame a window is expressed in.
#[derive(Clone, Copy, Debug)]
struct Anchor {
    p: Vec3,
    r: Mat3,
    q: Quat,
}

impl Anchor {
    const ORIGIN: Anchor = Anchor {
        p: Vec3::new(0.0, 0.0, 0.0),
        r: Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
        q: Quat::IDENTITY,
    };
}

/// Input standardization and output scaling around the window anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm {
    pub mode: NormMode,
    pub in_mean: Mat,
    pub in_std: Mat,
    pub out_mean: Mat,
    pub out_std: Mat,
    /// False until statistics were estimated or loaded.
    pub fitted: bool,
}

impl FeatureNorm {
    pub fn identity(mode: NormMode) -> Self {
        let ones = |n| Mat::from_vec(n, 1, vec![1.0; n]).unwrap();
        FeatureNorm {
            mode,
            in_mean: Mat::zeros(FEATURES, 1),
            in_std: ones(FEATURES),
            out_mean: Mat::zeros(3, 1),
            out_std: ones(3),
            fitted: mode == NormMode::None,
        }
    }

    fn anchor(&self, features: &Mat) -> Result<Anchor> {
        if self.mode == NormMode::None {
            return Ok(Anchor::ORIGIN);
        }
        let last = features.row(features.rows - 1);
        let q = Quat::new(last[3], last[4], last[5], last[6]).normalized()?;
        Ok(Anchor {
            p: Vec3::new(last[0], last[1], last[2]),
            r: q.to_rotation_matrix(),
            q,
        })
    }

    /// Anchor-frame features before standardization.
    fn relative(&self, features: &Mat, a: &Anchor) -> Mat {
        let mut out = features.clone();
        if self.mode == NormMode::None {
            return out;
        }
        let qa = a.q.conj();
        for t in 0..out.rows {
            let row = out.row_mut(t);
            let p = a.r.transpose() * (Vec3::new(row[0], row[1], row[2]) - a.p);
            let q = (qa * Quat::new(row[3], row[4], row[5], row[6])).canonical();
            row[..3].copy_from_slice(p.as_slice());
            row[3..7].copy_from_slice(&q.to_array());
        }
        out
    }

    fn prepare(&self, features: &Mat) -> Result<(Mat, Anchor)> {
        let a = self.anchor(features)?;
        let mut x = self.relative(features, &a);
        for t in 0..x.rows {
            for (j, v) in x.row_mut(t).iter_mut().enumerate() {
                *v = (*v - self.in_mean.data[j]) / self.in_std.data[j];
            }
        }
        Ok((x, a))
    }

    /// Estimates the statistics from `windows`; a no-op for [`NormMode::None`].
    pub fn fit(&mut self, windows: &[FusionWindow]) -> Result<()> {
        if self.mode == NormMode::None {
            self.fitted = true;
            return Ok(());
        }
        let mut inputs = vec![Vec::new(); FEATURES];
        let mut outputs = vec![Vec::new(); 3];
        for w in windows {
            let a = self.anchor(&w.features)?;
            let x = self.relative(&w.features, &a);
            for t in 0..x.rows {
                x.row(t).iter().zip(inputs.iter_mut()).for_each(|(v, col)| col.push(*v));
            }
            if let Some(g) = &w.target {
                let d = a.r.transpose() * (g.p - a.p);
                (0..3).for_each(|k| outputs[k].push(d[k]));
            }
        }
        let stats = |cols: &[Vec<f64>], mean: &mut Mat, std: &mut Mat| {
            for (j, c) in cols.iter().enumerate() {
                if c.is_empty() {
                    continue;
                }
                let m = c.iter().sum::<f64>() / c.len() as f64;
                let s = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c.len() as f64).sqrt();
                mean.data[j] = m;
                std.data[j] = if s > 1e-8 { s } else { 1.0 };
            }
        };
        stats(&inputs, &mut self.in_mean, &mut self.in_std);
        stats(&outputs, &mut self.out_mean, &mut self.out_std);
        self.fitted = true;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionNetwork {
    pub config: FusionConfig,
    pub stack: CellStack,
    pub fc_p: Linear,
    pub fc_q: Linear,
    pub norm: FeatureNorm,
}

/// Pose with the raw quaternion head value, and its canonical unit version.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionOutput {
    pub raw: Pose,
    pub pose: Pose,
}

impl FusionNetwork {
    /// Random weights; the quaternion head starts biased towards the identity.
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = CellStack::init(config.cell, FEATURES, config.r_u, config.stacked, &mut rng)?;
        let fc_p = Linear::init(config.r_u, 3, &mut rng);
        let mut fc_q = Linear::init(config.r_u, 4, &mut rng);
        fc_q.b.data[0] = 1.0;
        let norm = FeatureNorm::identity(config.normalization);
        Ok(FusionNetwork {
            config,
            stack,
            fc_p,
            fc_q,
            norm,
        })
    }

    pub fn zeros_like(&self) -> Self {
        FusionNetwork {
            config: self.config.clone(),
            stack: self.stack.zeros_like(),
            fc_p: Linear::zeros(self.config.r_u, 3),
            fc_q: Linear::zeros(self.config.r_u, 4),
            norm: self.norm.clone(),
        }
    }

    pub fn fit_normalization(&mut self, windows: &[FusionWindow]) -> Result<()> {
        self.norm.fit(windows)
    }

    fn check_window(&self, w: &FusionWindow) -> Result<()> {
        if (w.features.rows, w.features.cols) != (self.config.n_t, FEATURES) {
            return Err(Error::shape(format!(
                "window is {}x{}, network expects {}x{FEATURES}",
                w.features.rows, w.features.cols, self.config.n_t
            )));
        }
        Ok(())
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .stack
            .cells
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.tensors.iter().map(move |(n, _)| format!("cell{i}.{n}")))
            .collect();
        names.extend(["fc_p.w", "fc_p.b", "fc_q.w", "fc_q.b"].map(String::from));
        names
    }

    const NORM_NAMES: [&'static str; 5] = ["norm.mode", "norm.in_mean", "norm.in_std", "norm.out_mean", "norm.out_std"];

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Mat)> = self.tensor_names().into_iter().zip(self.tensors().into_iter().cloned()).collect();
        let mode = Mat::from_vec(1, 1, vec![(self.norm.mode == NormMode::Anchor) as u8 as f64]).unwrap();
        let n = &self.norm;
        for (name, m) in Self::NORM_NAMES.iter().zip([&mode, &n.in_mean, &n.in_std, &n.out_mean, &n.out_std]) {
            tensors.push((name.to_string(), m.clone()));
        }
        Checkpoint {
            header: Header {
                model: ModelTag::Fusion,
                kind: self.config.cell,
                input_dim: FEATURES as u32,
                units: self.config.r_u as u32,
                stacked: self.config.stacked,
                aux: self.config.n_t as u32,
            },
            tensors,
        }
    }

    /// Rebuilds a network; `beta3` and `batch_size` take their defaults.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let h = &ck.header;
        if h.model != ModelTag::Fusion || h.input_dim as usize != FEATURES {
            return Err(Error::Format("not a fusion network checkpoint".into()));
        }
        let mode = if ck.tensor("norm.mode")?.data[0] != 0.0 {
            NormMode::Anchor
        } else {
            NormMode::None
        };
        let config = FusionConfig {
            cell: h.kind,
            n_t: h.aux as usize,
            r_u: h.units as usize,
            stacked: h.stacked,
            normalization: mode,
            ..FusionConfig::default()
        };
        let mut net = Self::new(config, 0)?;
        let names = net.tensor_names();
        ck.restore(&names, net.tensors_mut())?;
        let names: Vec<String> = Self::NORM_NAMES[1..].iter().map(|s| s.to_string()).collect();
        let n = &mut net.norm;
        ck.restore(&names, vec![&mut n.in_mean, &mut n.in_std, &mut n.out_mean, &mut n.out_std])?;
        n.fitted = true;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Maps head values to the raw output pose.
    fn decode(&self, a: &Anchor, hp: &[f64], hq: &[f64]) -> Pose {
        let n = &self.norm;
        let local = Vec3::from_fn(|k, _| n.out_mean.data[k] + n.out_std.data[k] * hp[k]);
        Pose {
            p: a.p + a.r * local,
            q: a.q * Quat::new(hq[0], hq[1], hq[2], hq[3]),
        }
    }
}

impl Trainable for FusionNetwork {
    fn tensors(&self) -> Vec<&Mat> {
        let mut t = self.stack.tensors();
        t.extend(self.fc_p.tensors());
        t.extend(self.fc_q.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut t = self.stack.tensors_mut();
        t.extend(self.fc_p.tensors_mut());
        t.extend(self.fc_q.tensors_mut());
        t
    }
}

pub fn fusion_forward(net: &FusionNetwork, window: &FusionWindow) -> Result<FusionOutput> {
    net.check_window(window)?;
    let (xs, a) = net.norm.prepare(&window.features)?;
    let fwd = net.stack.forward(&xs)?;
    let h = fwd.hs.row(xs.rows - 1);
    let raw = net.decode(&a, &net.fc_p.forward(h), &net.fc_q.forward(h));
    let pose = Pose::new(raw.p, raw.q)?;
    Ok(FusionOutput { raw, pose })
}

/// Loss and full parameter gradient for one window with a target.
pub fn fusion_sample_grad(net: &FusionNetwork, window: &FusionWindow) -> Result<(f64, FusionNetwork)> {
    net.check_window(window)?;
    let gt = window.target.ok_or_else(|| Error::invalid("training window has no target"))?;
    let (xs, a) = net.norm.prepare(&window.features)?;
    let fwd = net.stack.forward(&xs)?;
    let t = xs.rows - 1;
    let h = fwd.hs.row(t);
    let raw = net.decode(&a, &net.fc_p.forward(h), &net.fc_q.forward(h));
    let (loss, gp, gq) = loss_and_grad(&raw, &gt, net.config.beta3)?;

    let local = a.r.transpose() * gp;
    let dhp: Vec<f64> = (0..3).map(|k| net.norm.out_std.data[k] * local[k]).collect();
    let dhq = (a.q.conj() * gq).to_array();
    let mut g = net.zeros_like();
    let mut dh = net.fc_p.backward(h, &dhp, &mut g.fc_p);
    let dq = net.fc_q.backward(h, &dhq, &mut g.fc_q);
    dh.iter_mut().zip(&dq).for_each(|(a, b)| *a += b);
    let mut dhs = Mat::zeros(xs.rows, net.config.r_u);
    dhs.row_mut(t).copy_from_slice(&dh);
    g.stack = net.stack.backward(&fwd, &dhs)?.stack;
    Ok((loss, g))
}

/// Adam over the fusion loss; returns the per-iteration batch loss.
///
/// The batch size comes from the network's config. Normalization statistics
/// are estimated from `windows` first unless already fitted.
pub fn train_fusion(net: &mut FusionNetwork, windows: &[FusionWindow], config: &TrainConfig) -> Result<Vec<f64>> {
    if windows.is_empty() {
        return Err(Error::EmptyInput);
    }
    for w in windows {
        net.check_window(w)?;
        if w.target.is_none() {
            return Err(Error::invalid("training window has no target"));
        }
    }
    if !net.norm.fitted {
        net.fit_normalization(windows)?;
    }
    let cfg = TrainConfig {
        batch_size: net.config.batch_size,
        ..config.clone()
    };
    train_minibatch(net, windows.len(), &cfg, |n, i| fusion_sample_grad(n, &windows[i]))
}

/// Fused stream of the same length as `abs`; the first `n_t − 1` poses,
/// which have no full window, are passed through unchanged.
pub fn fuse_stream(net: &FusionNetwork, abs: &[Pose], rel: &[RelativePose]) -> Result<Vec<Pose>> {
    let windows = build_windows(abs, rel, net.config.n_t, None)?;
    let fused = par::map_slice(&windows, |w| fusion_forward(net, w).map(|o| o.pose));
    let mut out = abs[..net.config.n_t - 1].to_vec();
    for f in fused {
        out.push(f?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
