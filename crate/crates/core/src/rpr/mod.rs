//! Relative pose regression from pooled optical flow.
//!
//! Each flow channel is read row by row as a sequence by its own LSTM; the two
//! final hidden states are concatenated and fed to two affine heads that
//! produce the translation (3) and rotation (4) of the pose delta.

mod data;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::checkpoint::{Checkpoint, Header, ModelTag};
use crate::cells::{cell_backward, cell_forward, train_minibatch, CellKind, CellSpec, Linear, Mat, ParamTensor, TrainConfig, Trainable};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::{relative_pose, Pose, Quat, RelativePose, Vec3};

pub use data::{read_manifest, sim_samples, write_manifest, RprSample};

/// Hidden units per channel encoder.
pub const UNITS: usize = 50;
/// Pooled flow shape consumed by the full-size network.
pub const ROWS: usize = 120;
pub const COLS: usize = 160;

#[derive(Debug, Clone, PartialEq)]
pub struct RprNetwork {
    pub rows: usize,
    pub cols: usize,
    pub lstm_u: ParamTensor,
    pub lstm_v: ParamTensor,
    pub fc_dp: Linear,
    pub fc_dq: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RprLossWeights {
    pub beta2: f64,
}

impl Default for RprLossWeights {
    fn default() -> Self {
        RprLossWeights { beta2: 50.0 }
    }
}

/// Network output: raw head values and the canonical unit-quaternion pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RprOutput {
    /// Head outputs before any normalization.
    pub raw: RelativePose,
    pub rel: RelativePose,
}

impl RprNetwork {
    /// Randomly initialized network for `rows × cols` pooled flow; the
    /// rotation head starts biased towards the identity.
    pub fn new(rows: usize, cols: usize, units: usize, seed: u64) -> Result<Self> {
        if rows == 0 {
            return Err(Error::invalid("rows must be >= 1"));
        }
        let spec = CellSpec::new(CellKind::Lstm, cols, units)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lstm_u = ParamTensor::init(spec, &mut rng);
        let lstm_v = ParamTensor::init(spec, &mut rng);
        let fc_dp = Linear::init(2 * units, 3, &mut rng);
        let mut fc_dq = Linear::init(2 * units, 4, &mut rng);
        fc_dq.b.data[0] = 1.0;
        Ok(RprNetwork {
            rows,
            cols,
            lstm_u,
            lstm_v,
            fc_dp,
            fc_dq,
        })
    }

    /// Full-size network: 120×160 input, 50 units per channel.
    pub fn standard(seed: u64) -> Result<Self> {
        Self::new(ROWS, COLS, UNITS, seed)
    }

    pub fn units(&self) -> usize {
        self.lstm_u.spec.units
    }

    pub fn zeros_like(&self) -> Self {
        RprNetwork {
            rows: self.rows,
            cols: self.cols,
            lstm_u: self.lstm_u.zeros_like(),
            lstm_v: self.lstm_v.zeros_like(),
            fc_dp: Linear::zeros(self.fc_dp.inputs(), 3),
            fc_dq: Linear::zeros(self.fc_dq.inputs(), 4),
        }
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (prefix, p) in [("u", &self.lstm_u), ("v", &self.lstm_v)] {
            names.extend(p.tensors.iter().map(|(n, _)| format!("{prefix}.{n}")));
        }
        names.extend(["dp.w", "dp.b", "dq.w", "dq.b"].map(String::from));
        names
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: Header {
                model: ModelTag::Rpr,
                kind: CellKind::Lstm,
                input_dim: self.cols as u32,
                units: self.units() as u32,
                stacked: false,
                aux: self.rows as u32,
            },
            tensors: self.tensor_names().into_iter().zip(self.tensors().into_iter().cloned()).collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let h = &ck.header;
        if h.model != ModelTag::Rpr || h.kind != CellKind::Lstm {
            return Err(Error::Format("not a relative pose network checkpoint".into()));
        }
        let mut net = Self::new(h.aux as usize, h.input_dim as usize, h.units as usize, 0)?;
        let names = net.tensor_names();
        ck.restore(&names, net.tensors_mut())?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn check_input(&self, flow: &FlowField) -> Result<()> {
        if (flow.height, flow.width) != (self.rows, self.cols) {
            return Err(Error::shape(format!(
                "flow is {}x{}, network expects {}x{}",
                flow.height, flow.width, self.rows, self.cols
            )));
        }
        Ok(())
    }
}

impl Trainable for RprNetwork {
    fn tensors(&self) -> Vec<&Mat> {
        let mut t = self.lstm_u.tensors();
        t.extend(self.lstm_v.tensors());
        t.extend(self.fc_dp.tensors());
        t.extend(self.fc_dq.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut t = self.lstm_u.tensors_mut();
        t.extend(self.lstm_v.tensors_mut());
        t.extend(self.fc_dp.tensors_mut());
        t.extend(self.fc_dq.tensors_mut());
        t
    }
}

fn channel_seq(flow: &FlowField, c: usize) -> Result<Mat> {
    Mat::from_vec(flow.height, flow.width, flow.channel(c).to_vec())
}

fn heads(net: &RprNetwork, feat: &[f64]) -> Result<RprOutput> {
    let dp = net.fc_dp.forward(feat);
    let dq = net.fc_dq.forward(feat);
    let raw = RelativePose {
        dp: Vec3::new(dp[0], dp[1], dp[2]),
        dq: Quat::new(dq[0], dq[1], dq[2], dq[3]),
    };
    let rel = RelativePose {
        dp: raw.dp,
        dq: raw.dq.normalized()?,
    };
    Ok(RprOutput { raw, rel })
}

pub fn rpr_forward(net: &RprNetwork, pooled: &FlowField) -> Result<RprOutput> {
    net.check_input(pooled)?;
    let hu = cell_forward(&net.lstm_u, &channel_seq(pooled, 0)?, None)?;
    let hv = cell_forward(&net.lstm_v, &channel_seq(pooled, 1)?, None)?;
    let t = pooled.height - 1;
    let feat: Vec<f64> = hu.hs.row(t).iter().chain(hv.hs.row(t)).copied().collect();
    heads(net, &feat)
}

/// `‖dp̂ − dp‖ + β₂ ‖dq̂ − dq/‖dq‖‖` with unsquared norms.
pub fn rpr_loss(pred: &RelativePose, gt: &RelativePose, w: &RprLossWeights) -> Result<f64> {
    Ok(loss_and_grad(pred, gt, w)?.0)
}

/// Loss plus its gradient with respect to the raw `dp̂` and `dq̂`; the
/// subgradient at a zero residual is taken as zero.
fn loss_and_grad(pred: &RelativePose, gt: &RelativePose, w: &RprLossWeights) -> Result<(f64, [f64; 3], [f64; 4])> {
    let n = gt.dq.norm();
    if !(n > 0.0) {
        return Err(Error::DegenerateQuaternion);
    }
    let ep = pred.dp - gt.dp;
    let eq: Vec<f64> = pred.dq.to_array().iter().zip(gt.dq.to_array()).map(|(a, b)| a - b / n).collect();
    let np = ep.norm();
    let nq = eq.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut gp = [0.0; 3];
    let mut gq = [0.0; 4];
    if np > 0.0 {
        (0..3).for_each(|k| gp[k] = ep[k] / np);
    }
    if nq > 0.0 {
        (0..4).for_each(|k| gq[k] = w.beta2 * eq[k] / nq);
    }
    Ok((np + w.beta2 * nq, gp, gq))
}

/// Training label for the frame pair `(prev, cur)`.
pub fn make_rpr_target(prev: &Pose, cur: &Pose) -> RelativePose {
    relative_pose(prev, cur)
}

/// Loss and full parameter gradient for one sample.
pub fn rpr_sample_grad(net: &RprNetwork, sample: &RprSample, w: &RprLossWeights) -> Result<(f64, RprNetwork)> {
    net.check_input(&sample.flow)?;
    let xu = channel_seq(&sample.flow, 0)?;
    let xv = channel_seq(&sample.flow, 1)?;
    let fu = cell_forward(&net.lstm_u, &xu, None)?;
    let fv = cell_forward(&net.lstm_v, &xv, None)?;
    let t = sample.flow.height - 1;
    let h = net.units();
    let feat: Vec<f64> = fu.hs.row(t).iter().chain(fv.hs.row(t)).copied().collect();
    let out = heads(net, &feat)?;
    let (loss, gp, gq) = loss_and_grad(&out.raw, &sample.target, w)?;

    let mut g = net.zeros_like();
    let mut dfeat = net.fc_dp.backward(&feat, &gp, &mut g.fc_dp);
    let dq_feat = net.fc_dq.backward(&feat, &gq, &mut g.fc_dq);
    dfeat.iter_mut().zip(&dq_feat).for_each(|(a, b)| *a += b);

    for (c, (fwd, params)) in [(&fu, &net.lstm_u), (&fv, &net.lstm_v)].into_iter().enumerate() {
        let mut dhs = Mat::zeros(sample.flow.height, h);
        dhs.row_mut(t).copy_from_slice(&dfeat[c * h..(c + 1) * h]);
        let cg = cell_backward(params, &fwd.saved, &dhs)?;
        if c == 0 {
            g.lstm_u = cg.params;
        } else {
            g.lstm_v = cg.params;
        }
    }
    Ok((loss, g))
}

/// Adam over the relative pose loss; returns the per-iteration batch loss.
pub fn train_rpr(net: &mut RprNetwork, dataset: &[RprSample], w: &RprLossWeights, config: &TrainConfig) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(w.beta2 > 0.0) {
        return Err(Error::invalid("beta2 must be positive"));
    }
    for s in dataset {
        net.check_input(&s.flow)?;
    }
    train_minibatch(net, dataset.len(), config, |n, i| rpr_sample_grad(n, &dataset[i], w))
}
