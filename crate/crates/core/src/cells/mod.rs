//! Recurrent cell zoo with exact backpropagation through time, plus the
//! shared learning substrate: affine heads, Adam, checkpoints and the
//! copy-memory probe task.
//!
//! All arithmetic is `f64` so gradients can be checked against finite
//! differences.

mod adam;
pub mod checkpoint;
pub mod copy_task;
mod linear;
mod stack;
mod tensor;

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{adam_step, mean_gradient, train_minibatch, AdamState, TrainConfig, Trainable};
pub use linear::Linear;
pub use stack::{CellStack, StackForward, StackGrads};
pub use tensor::Mat;
pub(crate) use tensor::{gemv_add, gemv_t_add, outer_add, sigmoid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CellKind {
    Lstm,
    Gru,
    Mgu,
    Ran,
    Sru,
    Qrnn,
    Trnn,
    Cfn,
}

impl CellKind {
    pub const ALL: [CellKind; 8] = [
        CellKind::Lstm,
        CellKind::Gru,
        CellKind::Mgu,
        CellKind::Ran,
        CellKind::Sru,
        CellKind::Qrnn,
        CellKind::Trnn,
        CellKind::Cfn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Lstm => "LSTM",
            CellKind::Gru => "GRU",
            CellKind::Mgu => "MGU",
            CellKind::Ran => "RAN",
            CellKind::Sru => "SRU",
            CellKind::Qrnn => "QRNN",
            CellKind::Trnn => "TRNN",
            CellKind::Cfn => "CFN",
        }
    }

    pub(crate) fn code(self) -> u8 {
        Self::ALL.iter().position(|k| *k == self).unwrap() as u8
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        Self::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown cell code {c}")))
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown cell kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellSpec {
    pub kind: CellKind,
    pub input_dim: usize,
    pub units: usize,
}

impl CellSpec {
    pub fn new(kind: CellKind, input_dim: usize, units: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input_dim must be >= 1"));
        }
        if units == 0 {
            return Err(Error::invalid("r_u must be >= 1"));
        }
        Ok(Self {
            kind,
            input_dim,
            units,
        })
    }

    /// Length of the recurrent state vector carried between steps.
    ///
    /// LSTM carries `[h, c]`; RAN, SRU and QRNN carry their cell state `c`;
    /// the rest carry `h`.
    pub fn state_dim(&self) -> usize {
        match self.kind {
            CellKind::Lstm => 2 * self.units,
            _ => self.units,
        }
    }

    fn sru_projects_highway(&self) -> bool {
        self.kind == CellKind::Sru && self.input_dim != self.units
    }
}

struct TensorDef {
    name: &'static str,
    rows: usize,
    cols: usize,
    fan_in: usize,
}

fn layout(spec: &CellSpec) -> Vec<TensorDef> {
    let (i, h) = (spec.input_dim, spec.units);
    let t = |name, rows, cols, fan_in| TensorDef {
        name,
        rows,
        cols,
        fan_in,
    };
    match spec.kind {
        CellKind::Lstm => vec![t("W", 4 * h, i, i + h), t("U", 4 * h, h, i + h), t("b", 4 * h, 1, 0)],
        CellKind::Gru => vec![t("W", 3 * h, i, i + h), t("U", 3 * h, h, i + h), t("b", 3 * h, 1, 0)],
        CellKind::Mgu => vec![t("W", 2 * h, i, i + h), t("U", 2 * h, h, i + h), t("b", 2 * h, 1, 0)],
        CellKind::Ran => vec![
            t("Wc", h, i, i),
            t("W", 2 * h, i, i + h),
            t("U", 2 * h, h, i + h),
            t("b", 2 * h, 1, 0),
        ],
        CellKind::Sru => {
            let mut v = vec![t("W", 3 * h, i, i), t("v", 2 * h, 1, h), t("b", 2 * h, 1, 0)];
            if spec.sru_projects_highway() {
                v.push(t("Ws", h, i, i));
            }
            v
        }
        CellKind::Qrnn => vec![t("W0", 3 * h, i, 2 * i), t("W1", 3 * h, i, 2 * i), t("b", 3 * h, 1, 0)],
        CellKind::Trnn => vec![t("W", 2 * h, i, i), t("b", 2 * h, 1, 0)],
        CellKind::Cfn => vec![
            t("W", 2 * h, i, i + h),
            t("U", 2 * h, h, i + h),
            t("b", 2 * h, 1, 0),
            t("Wx", h, i, i),
        ],
    }
}

/// Closed-form number of trainable weights and biases.
///
/// `stacked` counts the two-cell network whose first cell keeps the input
/// width (`units = input_dim`) and whose second cell has `spec.units` units.
pub fn param_count(spec: &CellSpec, stacked: bool) -> Result<usize> {
    let spec = CellSpec::new(spec.kind, spec.input_dim, spec.units)?;
    let single = |i: usize, h: usize| -> usize {
        match spec.kind {
            CellKind::Lstm => 4 * h * (i + h + 1),
            CellKind::Gru => 3 * h * (i + h + 1),
            CellKind::Mgu => 2 * h * (i + h + 1),
            CellKind::Ran => i * h + 2 * h * (i + h + 1),
            CellKind::Sru => 3 * i * h + 4 * h + if i != h { i * h } else { 0 },
            CellKind::Qrnn => 3 * h * (2 * i + 1),
            CellKind::Trnn => 2 * h * (i + 1),
            CellKind::Cfn => 2 * h * (i + h + 1) + i * h,
        }
    };
    Ok(if stacked {
        single(spec.input_dim, spec.input_dim) + single(spec.input_dim, spec.units)
    } else {
        single(spec.input_dim, spec.units)
    })
}

/// Named weight matrices and bias vectors of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub spec: CellSpec,
    pub tensors: Vec<(String, Mat)>,
}

impl ParamTensor {
    pub fn zeros(spec: CellSpec) -> Self {
        let tensors = layout(&spec)
            .into_iter()
            .map(|d| (d.name.to_string(), Mat::zeros(d.rows, d.cols)))
            .collect();
        Self { spec, tensors }
    }

    /// Uniform `±1/√fan_in` weights, zero biases, forget-gate bias 1 for LSTM
    /// and MGU.
    pub fn init(spec: CellSpec, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(spec);
        for (def, (_, m)) in layout(&spec).iter().zip(p.tensors.iter_mut()) {
            if def.fan_in == 0 {
                continue;
            }
            let a = 1.0 / (def.fan_in as f64).sqrt();
            m.data.iter_mut().for_each(|x| *x = rng.random_range(-a..a));
        }
        let h = spec.units;
        match spec.kind {
            CellKind::Lstm => p.get_mut("b").data[h..2 * h].fill(1.0),
            CellKind::Mgu => p.get_mut("b").data[..h].fill(1.0),
            _ => {}
        }
        p
    }

    pub fn get(&self, name: &str) -> &Mat {
        &self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no tensor `{name}`"))
            .1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        &mut self
            .tensors
            .iter_mut()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no tensor `{name}`"))
            .1
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.spec)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, m)| m.is_finite())
    }

    /// Checks that tensor names and shapes match the spec's layout.
    pub fn validate(&self) -> Result<()> {
        let defs = layout(&self.spec);
        if defs.len() != self.tensors.len() {
            return Err(Error::shape("tensor count does not match cell layout"));
        }
        for (d, (n, m)) in defs.iter().zip(&self.tensors) {
            if d.name != n || d.rows != m.rows || d.cols != m.cols {
                return Err(Error::shape(format!(
                    "tensor `{n}` is {}x{}, expected `{}` {}x{}",
                    m.rows, m.cols, d.name, d.rows, d.cols
                )));
            }
        }
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.spec.hash(&mut h);
        for (_, m) in &self.tensors {
            for x in &m.data {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

struct StepCache {
    prev: Vec<f64>,
    acts: Vec<f64>,
    state: Vec<f64>,
}

/// Activations recorded by [`cell_forward`]; enough for an exact backward.
pub struct Saved {
    spec: CellSpec,
    fingerprint: u64,
    xs: Mat,
    steps: Vec<StepCache>,
}

impl Saved {
    pub fn spec(&self) -> CellSpec {
        self.spec
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

pub struct ForwardOutput {
    /// `T x units` hidden sequence.
    pub hs: Mat,
    pub final_state: Vec<f64>,
    pub saved: Saved,
}

pub struct CellGrads {
    pub params: ParamTensor,
    pub dxs: Mat,
    pub dstate0: Vec<f64>,
}

/// Runs a cell over `xs` (`T x input_dim`) from `state0` (zeros when `None`).
pub fn cell_forward(params: &ParamTensor, xs: &Mat, state0: Option<&[f64]>) -> Result<ForwardOutput> {
    let spec = params.spec;
    params.validate()?;
    if xs.rows == 0 {
        return Err(Error::shape("sequence must have at least one step"));
    }
    if xs.cols != spec.input_dim {
        return Err(Error::shape(format!(
            "input width {} != input_dim {}",
            xs.cols, spec.input_dim
        )));
    }
    let sd = spec.state_dim();
    let mut state = match state0 {
        Some(s) if s.len() != sd => {
            return Err(Error::shape(format!("state length {} != {sd}", s.len())))
        }
        Some(s) => s.to_vec(),
        None => vec![0.0; sd],
    };
    let h = spec.units;
    let mut hs = Mat::zeros(xs.rows, h);
    let mut steps = Vec::with_capacity(xs.rows);
    for t in 0..xs.rows {
        let x = xs.row(t);
        let x_prev = if t > 0 { Some(xs.row(t - 1)) } else { None };
        let (acts, next, out) = step_forward(params, x, x_prev, &state);
        if !out.iter().all(|v| v.is_finite()) || !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged(format!("{} state at step {t}", spec.kind)));
        }
        hs.row_mut(t).copy_from_slice(&out);
        let prev = std::mem::replace(&mut state, next);
        steps.push(StepCache {
            prev,
            acts,
            state: state.clone(),
        });
    }
    Ok(ForwardOutput {
        hs,
        final_state: state,
        saved: Saved {
            spec,
            fingerprint: params.fingerprint(),
            xs: xs.clone(),
            steps,
        },
    })
}

/// One recurrence step: returns `(activations, new state, output h)`.
fn step_forward(p: &ParamTensor, x: &[f64], x_prev: Option<&[f64]>, prev: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let spec = p.spec;
    let h = spec.units;
    match spec.kind {
        CellKind::Lstm => {
            let (hp, cp) = prev.split_at(h);
            let mut a = p.get("b").data.clone();
            gemv_add(p.get("W"), 0, x, &mut a);
            gemv_add(p.get("U"), 0, hp, &mut a);
            let mut acts = vec![0.0; 5 * h];
            let mut c = vec![0.0; h];
            let mut hn = vec![0.0; h];
            for k in 0..h {
                let i = sigmoid(a[k]);
                let f = sigmoid(a[h + k]);
                let g = a[2 * h + k].tanh();
                let o = sigmoid(a[3 * h + k]);
                c[k] = f * cp[k] + i * g;
                let tc = c[k].tanh();
                hn[k] = o * tc;
                acts[k] = i;
                acts[h + k] = f;
                acts[2 * h + k] = g;
                acts[3 * h + k] = o;
                acts[4 * h + k] = tc;
            }
            let mut st = hn.clone();
            st.extend_from_slice(&c);
            (acts, st, hn)
        }
        CellKind::Gru => {
            let mut a = p.get("b").data.clone();
            gemv_add(p.get("W"), 0, x, &mut a);
            gemv_add(p.get("U"), 0, prev, &mut a[..2 * h]);
            let mut acts = vec![0.0; 3 * h];
            for k in 0..2 * h {
                acts[k] = sigmoid(a[k]);
            }
            let rh: Vec<f64> = (0..h).map(|k| acts[h + k] * prev[k]).collect();
            gemv_add(p.get("U"), 2 * h, &rh, &mut a[2 * h..]);
            let mut hn = vec![0.0; h];
            for k in 0..h {
                let n = a[2 * h + k].tanh();
                acts[2 * h + k] = n;
                let z = acts[k];
                hn[k] = (1.0 - z) * prev[k] + z * n;
            }
            (acts, hn.clone(), hn)
        }
        CellKind::Mgu => {
            let mut a = p.get("b").data.clone();
            gemv_add(p.get("W"), 0, x, &mut a);
            gemv_add(p.get("U"), 0, prev, &mut a[..h]);
            let mut acts = vec![0.0; 2 * h];
            for k in 0..h {
                acts[k] = sigmoid(a[k]);
            }
            let fh: Vec<f64> = (0..h).map(|k| acts[k] * prev[k]).collect();
            gemv_add(p.get("U"), h, &fh, &mut a[h..]);
            let mut hn = vec![0.0; h];
            for k in 0..h {
                let n = a[h + k].tanh();
                acts[h + k] = n;
                let f = acts[k];
                hn[k] = (1.0 - f) * prev[k] + f * n;
            }
            (acts, hn.clone(), hn)
        }
        CellKind::Ran => {
            let hp: Vec<f64> = prev.iter().map(|c| c.tanh()).collect();
            let mut ct = vec![0.0; h];
            gemv_add(p.get("Wc"), 0, x, &mut ct);
            let mut a = p.get("b").data.clone();
            gemv_add(p.get("W"), 0, x, &mut a);
            gemv_add(p.get("U"), 0, &hp, &mut a);
            let mut acts = vec![0.0; 3 * h];
            let mut c = vec![0.0; h];
            for k in 0..h {
                let i = sigmoid(a[k]);
                let f = sigmoid(a[h + k]);
                c[k] = i * ct[k] + f * prev[k];
                acts[k] = ct[k];
                acts[h + k] = i;
                acts[2 * h + k] = f;
            }
            let hn = c.iter().map(|v| v.tanh()).collect();
            (acts, c, hn)
        }
        CellKind::Sru => {
            let mut a = vec![0.0; 3 * h];
            gemv_add(p.get("W"), 0, x, &mut a);
            let v = &p.get("v").data;
            let b = &p.get("b").data;
            let hw: Vec<f64> = if spec.sru_projects_highway() {
                let mut s = vec![0.0; h];
                gemv_add(p.get("Ws"), 0, x, &mut s);
                s
            } else {
                x.to_vec()
            };
            let mut acts = vec![0.0; 4 * h];
            let mut c = vec![0.0; h];
            let mut hn = vec![0.0; h];
            for k in 0..h {
                let xt = a[k];
                let f = sigmoid(a[h + k] + v[k] * prev[k] + b[k]);
                let r = sigmoid(a[2 * h + k] + v[h + k] * prev[k] + b[h + k]);
                c[k] = f * prev[k] + (1.0 - f) * xt;
                hn[k] = r * c[k] + (1.0 - r) * hw[k];
                acts[k] = xt;
                acts[h + k] = f;
                acts[2 * h + k] = r;
                acts[3 * h + k] = hw[k];
            }
            (acts, c, hn)
        }
        CellKind::Qrnn => {
            let mut a = p.get("b").data.clone();
            gemv_add(p.get("W0"), 0, x, &mut a);
            if let Some(xp) = x_prev {
                gemv_add(p.get("W1"), 0, xp, &mut a);
            }
            let mut acts = vec![0.0; 3 * h];
            let mut c = vec![0.0; h];
            let mut hn = vec![0.0; h];
            for k in 0..h {
                let z = a[k].tanh();
                let f = sigmoid(a[h + k]);
                let o = sigmoid(a[2 * h + k]);
                c[k] = f * prev[k] + (1.0 - f) * z;
                hn[k] = o * c[k];
                acts[k] = z;
                acts[h + k] = f;
                acts[2 * h + k] = o;
            }
            (acts, c, hn)
        }
        CellKind::Trnn => {
            let mut a = p.get("b").data.clone();
            gemv_add(p.get("W"), 0, x, &mut a);
            let mut acts = vec![0.0; 2 * h];
            let mut hn = vec![0.0; h];
            for k in 0..h {
                let z = a[k];
                let f = sigmoid(a[h + k]);
                hn[k] = f * prev[k] + (1.0 - f) * z;
                acts[k] = z;
                acts[h + k] = f;
            }
            (acts, hn.clone(), hn)
        }
        CellKind::Cfn => {
            let mut a = p.get("b").data.clone();
            gemv_add(p.get("W"), 0, x, &mut a);
            gemv_add(p.get("U"), 0, prev, &mut a);
            let mut e = vec![0.0; h];
            gemv_add(p.get("Wx"), 0, x, &mut e);
            let mut acts = vec![0.0; 3 * h];
            let mut hn = vec![0.0; h];
            for k in 0..h {
                let f = sigmoid(a[k]);
                let i = sigmoid(a[h + k]);
                let ek = e[k].tanh();
                hn[k] = f * prev[k].tanh() + i * ek;
                acts[k] = f;
                acts[h + k] = i;
                acts[2 * h + k] = ek;
            }
            (acts, hn.clone(), hn)
        }
    }
}

/// Exact BPTT: gradients of the scalar loss whose `∂L/∂h_t` is `dhs[t]`.
///
/// `params` must be the parameters the activations were recorded with.
pub fn cell_backward(params: &ParamTensor, saved: &Saved, dhs: &Mat) -> Result<CellGrads> {
    if saved.spec != params.spec || saved.fingerprint != params.fingerprint() {
        return Err(Error::StaleActivations);
    }
    backward_unchecked(params, saved, dhs, None)
}

/// Backward with an additional gradient on the final state (used by stacks
/// and heads that read the last hidden state).
pub(crate) fn backward_unchecked(
    params: &ParamTensor,
    saved: &Saved,
    dhs: &Mat,
    dfinal: Option<&[f64]>,
) -> Result<CellGrads> {
    let spec = params.spec;
    let (t_len, h, i_dim) = (saved.steps.len(), spec.units, spec.input_dim);
    if dhs.rows != t_len || dhs.cols != h {
        return Err(Error::shape(format!(
            "output gradient is {}x{}, expected {t_len}x{h}",
            dhs.rows, dhs.cols
        )));
    }
    let mut g = params.zeros_like();
    let mut dxs = Mat::zeros(t_len, i_dim);
    let mut carry = match dfinal {
        Some(d) => d.to_vec(),
        None => vec![0.0; spec.state_dim()],
    };
    for t in (0..t_len).rev() {
        let st = &saved.steps[t];
        let x = saved.xs.row(t);
        let x_prev = if t > 0 { Some(saved.xs.row(t - 1)) } else { None };
        let mut dx = vec![0.0; i_dim];
        let mut dx_prev = vec![0.0; i_dim];
        carry = step_backward(
            params,
            &mut g,
            st,
            x,
            x_prev,
            dhs.row(t),
            &carry,
            &mut dx,
            &mut dx_prev,
        );
        for (d, v) in dxs.row_mut(t).iter_mut().zip(&dx) {
            *d += v;
        }
        if t > 0 && spec.kind == CellKind::Qrnn {
            for (d, v) in dxs.row_mut(t - 1).iter_mut().zip(&dx_prev) {
                *d += v;
            }
        }
    }
    Ok(CellGrads {
        params: g,
        dxs,
        dstate0: carry,
    })
}

#[allow(clippy::too_many_arguments)]
fn step_backward(
    p: &ParamTensor,
    g: &mut ParamTensor,
    st: &StepCache,
    x: &[f64],
    x_prev: Option<&[f64]>,
    dh_out: &[f64],
    carry: &[f64],
    dx: &mut [f64],
    dx_prev: &mut [f64],
) -> Vec<f64> {
    let spec = p.spec;
    let h = spec.units;
    let acts = &st.acts;
    let prev = &st.prev;
    match spec.kind {
        CellKind::Lstm => {
            let (hp, cp) = prev.split_at(h);
            let (dh_carry, dc_carry) = carry.split_at(h);
            let mut da = vec![0.0; 4 * h];
            let mut dcp = vec![0.0; h];
            for k in 0..h {
                let (i, f, gg, o, tc) = (acts[k], acts[h + k], acts[2 * h + k], acts[3 * h + k], acts[4 * h + k]);
                let dh = dh_out[k] + dh_carry[k];
                let d_o = dh * tc;
                let dc = dc_carry[k] + dh * o * (1.0 - tc * tc);
                da[k] = dc * gg * i * (1.0 - i);
                da[h + k] = dc * cp[k] * f * (1.0 - f);
                da[2 * h + k] = dc * i * (1.0 - gg * gg);
                da[3 * h + k] = d_o * o * (1.0 - o);
                dcp[k] = dc * f;
            }
            outer_add(g.get_mut("W"), 0, &da, x);
            outer_add(g.get_mut("U"), 0, &da, hp);
            g.get_mut("b").data.iter_mut().zip(&da).for_each(|(b, d)| *b += d);
            gemv_t_add(p.get("W"), 0, &da, dx);
            let mut dhp = vec![0.0; h];
            gemv_t_add(p.get("U"), 0, &da, &mut dhp);
            dhp.extend_from_slice(&dcp);
            dhp
        }
        CellKind::Gru => {
            let mut da = vec![0.0; 3 * h];
            let mut dhp = vec![0.0; h];
            for k in 0..h {
                let (z, n) = (acts[k], acts[2 * h + k]);
                let dh = dh_out[k] + carry[k];
                let dz = dh * (n - prev[k]);
                let dn = dh * z;
                dhp[k] += dh * (1.0 - z);
                da[k] = dz * z * (1.0 - z);
                da[2 * h + k] = dn * (1.0 - n * n);
            }
            let mut drh = vec![0.0; h];
            gemv_t_add(p.get("U"), 2 * h, &da[2 * h..], &mut drh);
            let rh: Vec<f64> = (0..h).map(|k| acts[h + k] * prev[k]).collect();
            outer_add(g.get_mut("U"), 2 * h, &da[2 * h..], &rh);
            for k in 0..h {
                let r = acts[h + k];
                da[h + k] = drh[k] * prev[k] * r * (1.0 - r);
                dhp[k] += drh[k] * r;
            }
            outer_add(g.get_mut("W"), 0, &da, x);
            outer_add(g.get_mut("U"), 0, &da[..2 * h], prev);
            g.get_mut("b").data.iter_mut().zip(&da).for_each(|(b, d)| *b += d);
            gemv_t_add(p.get("W"), 0, &da, dx);
            gemv_t_add(p.get("U"), 0, &da[..2 * h], &mut dhp);
            dhp
        }
        CellKind::Mgu => {
            let mut da = vec![0.0; 2 * h];
            let mut dhp = vec![0.0; h];
            let mut df = vec![0.0; h];
            for k in 0..h {
                let (f, n) = (acts[k], acts[h + k]);
                let dh = dh_out[k] + carry[k];
                df[k] = dh * (n - prev[k]);
                dhp[k] += dh * (1.0 - f);
                da[h + k] = dh * f * (1.0 - n * n);
            }
            let mut dfh = vec![0.0; h];
            gemv_t_add(p.get("U"), h, &da[h..], &mut dfh);
            let fh: Vec<f64> = (0..h).map(|k| acts[k] * prev[k]).collect();
            outer_add(g.get_mut("U"), h, &da[h..], &fh);
            for k in 0..h {
                let f = acts[k];
                df[k] += dfh[k] * prev[k];
                dhp[k] += dfh[k] * f;
                da[k] = df[k] * f * (1.0 - f);
            }
            outer_add(g.get_mut("W"), 0, &da, x);
            outer_add(g.get_mut("U"), 0, &da[..h], prev);
            g.get_mut("b").data.iter_mut().zip(&da).for_each(|(b, d)| *b += d);
            gemv_t_add(p.get("W"), 0, &da, dx);
            gemv_t_add(p.get("U"), 0, &da[..h], &mut dhp);
            dhp
        }
        CellKind::Ran => {
            let hp: Vec<f64> = prev.iter().map(|c| c.tanh()).collect();
            let mut da = vec![0.0; 2 * h];
            let mut dct = vec![0.0; h];
            let mut dcp = vec![0.0; h];
            for k in 0..h {
                let (ct, i, f) = (acts[k], acts[h + k], acts[2 * h + k]);
                let hk = st.state[k].tanh();
                let dc = carry[k] + dh_out[k] * (1.0 - hk * hk);
                dct[k] = dc * i;
                da[k] = dc * ct * i * (1.0 - i);
                da[h + k] = dc * prev[k] * f * (1.0 - f);
                dcp[k] = dc * f;
            }
            outer_add(g.get_mut("Wc"), 0, &dct, x);
            outer_add(g.get_mut("W"), 0, &da, x);
            outer_add(g.get_mut("U"), 0, &da, &hp);
            g.get_mut("b").data.iter_mut().zip(&da).for_each(|(b, d)| *b += d);
            gemv_t_add(p.get("Wc"), 0, &dct, dx);
            gemv_t_add(p.get("W"), 0, &da, dx);
            let mut dhp = vec![0.0; h];
            gemv_t_add(p.get("U"), 0, &da, &mut dhp);
            for k in 0..h {
                dcp[k] += dhp[k] * (1.0 - hp[k] * hp[k]);
            }
            dcp
        }
        CellKind::Sru => {
            let v = &p.get("v").data;
            let c = &st.state;
            let mut dlin = vec![0.0; 3 * h];
            let mut dhw = vec![0.0; h];
            let mut dcp = vec![0.0; h];
            let mut dv = vec![0.0; 2 * h];
            let mut db = vec![0.0; 2 * h];
            for k in 0..h {
                let (xt, f, r, hw) = (acts[k], acts[h + k], acts[2 * h + k], acts[3 * h + k]);
                let dh = dh_out[k];
                let dr = dh * (c[k] - hw);
                dhw[k] = dh * (1.0 - r);
                let dc = carry[k] + dh * r;
                let df = dc * (prev[k] - xt);
                dlin[k] = dc * (1.0 - f);
                let daf = df * f * (1.0 - f);
                let dar = dr * r * (1.0 - r);
                dlin[h + k] = daf;
                dlin[2 * h + k] = dar;
                dcp[k] = dc * f + daf * v[k] + dar * v[h + k];
                dv[k] = daf * prev[k];
                dv[h + k] = dar * prev[k];
                db[k] = daf;
                db[h + k] = dar;
            }
            outer_add(g.get_mut("W"), 0, &dlin, x);
            g.get_mut("v").data.iter_mut().zip(&dv).for_each(|(a, d)| *a += d);
            g.get_mut("b").data.iter_mut().zip(&db).for_each(|(a, d)| *a += d);
            gemv_t_add(p.get("W"), 0, &dlin, dx);
            if spec.sru_projects_highway() {
                outer_add(g.get_mut("Ws"), 0, &dhw, x);
                gemv_t_add(p.get("Ws"), 0, &dhw, dx);
            } else {
                dx.iter_mut().zip(&dhw).for_each(|(a, d)| *a += d);
            }
            dcp
        }
        CellKind::Qrnn => {
            let c = &st.state;
            let mut da = vec![0.0; 3 * h];
            let mut dcp = vec![0.0; h];
            for k in 0..h {
                let (z, f, o) = (acts[k], acts[h + k], acts[2 * h + k]);
                let dh = dh_out[k];
                let d_o = dh * c[k];
                let dc = carry[k] + dh * o;
                da[k] = dc * (1.0 - f) * (1.0 - z * z);
                da[h + k] = dc * (prev[k] - z) * f * (1.0 - f);
                da[2 * h + k] = d_o * o * (1.0 - o);
                dcp[k] = dc * f;
            }
            outer_add(g.get_mut("W0"), 0, &da, x);
            gemv_t_add(p.get("W0"), 0, &da, dx);
            if let Some(xp) = x_prev {
                outer_add(g.get_mut("W1"), 0, &da, xp);
                gemv_t_add(p.get("W1"), 0, &da, dx_prev);
            }
            g.get_mut("b").data.iter_mut().zip(&da).for_each(|(b, d)| *b += d);
            dcp
        }
        CellKind::Trnn => {
            let mut da = vec![0.0; 2 * h];
            let mut dhp = vec![0.0; h];
            for k in 0..h {
                let (z, f) = (acts[k], acts[h + k]);
                let dh = dh_out[k] + carry[k];
                dhp[k] = dh * f;
                da[k] = dh * (1.0 - f);
                da[h + k] = dh * (prev[k] - z) * f * (1.0 - f);
            }
            outer_add(g.get_mut("W"), 0, &da, x);
            g.get_mut("b").data.iter_mut().zip(&da).for_each(|(b, d)| *b += d);
            gemv_t_add(p.get("W"), 0, &da, dx);
            dhp
        }
        CellKind::Cfn => {
            let mut da = vec![0.0; 2 * h];
            let mut de = vec![0.0; h];
            let mut dhp = vec![0.0; h];
            for k in 0..h {
                let (f, i, e) = (acts[k], acts[h + k], acts[2 * h + k]);
                let th = prev[k].tanh();
                let dh = dh_out[k] + carry[k];
                da[k] = dh * th * f * (1.0 - f);
                da[h + k] = dh * e * i * (1.0 - i);
                de[k] = dh * i * (1.0 - e * e);
                dhp[k] = dh * f * (1.0 - th * th);
            }
            outer_add(g.get_mut("W"), 0, &da, x);
            outer_add(g.get_mut("U"), 0, &da, prev);
            outer_add(g.get_mut("Wx"), 0, &de, x);
            g.get_mut("b").data.iter_mut().zip(&da).for_each(|(b, d)| *b += d);
            gemv_t_add(p.get("W"), 0, &da, dx);
            gemv_t_add(p.get("Wx"), 0, &de, dx);
            gemv_t_add(p.get("U"), 0, &da, &mut dhp);
            dhp
        }
    }
}

#[cfg(test)]
mod tests;
