use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Mat, ParamTensor};
use crate::error::{Error, Result};
use crate::par;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 50,
            iterations: 5_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Anything exposing its parameters as an ordered list of matrices.
///
/// Gradients are stored in a value of the same type so the two lists line up.
pub trait Trainable {
    fn tensors(&self) -> Vec<&Mat>;
    fn tensors_mut(&mut self) -> Vec<&mut Mat>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    /// Flattened copy of every parameter, in tensor order.
    fn flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|m| m.data.iter().copied())
            .collect()
    }

    /// Mutable reference to the `idx`-th flattened parameter.
    fn flat_mut(&mut self, mut idx: usize) -> &mut f64 {
        for m in self.tensors_mut() {
            if idx < m.len() {
                return &mut m.data[idx];
            }
            idx -= m.len();
        }
        panic!("parameter index out of range")
    }
}

impl Trainable for ParamTensor {
    fn tensors(&self) -> Vec<&Mat> {
        self.tensors.iter().map(|(_, m)| m).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        self.tensors.iter_mut().map(|(_, m)| m).collect()
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

/// One bias-corrected Adam update (β₁ = 0.9, β₂ = 0.999, ε = 1e-8, no decay).
pub fn adam_step<T: Trainable>(
    params: &mut T,
    grads: &T,
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    let gs = grads.tensors();
    if gs.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    let mut ps = params.tensors_mut();
    if ps.len() != gs.len() || ps.iter().zip(&gs).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::shape("parameter and gradient layouts differ"));
    }
    if state.m.is_empty() {
        state.m = gs.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    for (k, (p, g)) in ps.iter_mut().zip(&gs).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for j in 0..g.len() {
            let gj = g.data[j];
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            p.data[j] -= learning_rate * mh / (vh.sqrt() + EPS);
        }
    }
    Ok(())
}

/// Batch-mean loss and gradient, summed in sample order.
pub fn mean_gradient<T: Trainable>(per_sample: Vec<Result<(f64, T)>>) -> Result<(f64, T)> {
    let n = per_sample.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let scale = 1.0 / n as f64;
    let mut iter = per_sample.into_iter();
    let (l0, mut acc) = iter.next().unwrap()?;
    let mut loss = l0 * scale;
    acc.tensors_mut().into_iter().for_each(|m| m.scale(scale));
    for r in iter {
        let (l, g) = r?;
        loss += l * scale;
        for (a, gi) in acc.tensors_mut().into_iter().zip(g.tensors()) {
            a.data.iter_mut().zip(&gi.data).for_each(|(a, b)| *a += b * scale);
        }
    }
    Ok((loss, acc))
}

/// Mini-batch Adam over `n_samples` indexed samples.
///
/// Batches walk seeded shuffles of the sample indices; per-sample gradients
/// run in parallel and are reduced in a fixed order, so results do not depend
/// on the thread count. Returns the batch-mean loss of every iteration.
pub fn train_minibatch<T, F>(model: &mut T, n_samples: usize, config: &TrainConfig, sample_grad: F) -> Result<Vec<f64>>
where
    T: Trainable + Sync + Send,
    F: Fn(&T, usize) -> Result<(f64, T)> + Sync + Send,
{
    config.validate()?;
    if n_samples == 0 {
        return Err(Error::EmptyInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut adam = AdamState::default();
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let m: &T = model;
        let per = par::map_slice(&batch, |i| sample_grad(m, *i));
        let (loss, grad) = mean_gradient(per)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at iteration {it}")));
        }
        adam_step(model, &grad, &mut adam, config.learning_rate)?;
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar(Mat);

    impl Trainable for Scalar {
        fn tensors(&self) -> Vec<&Mat> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Mat> {
            vec![&mut self.0]
        }
    }

    fn scalar(x: f64) -> Scalar {
        Scalar(Mat::from_vec(1, 1, vec![x]).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = scalar(0.5);
        let mut st = AdamState::default();
        adam_step(&mut p, &scalar(1.0), &mut st, 1e-3).unwrap();
        let (m1, v1) = (st.m[0][0], st.v[0][0]);
        let before = p.0.data[0];
        adam_step(&mut p, &scalar(0.0), &mut st, 1e-3).unwrap();
        assert_eq!(st.m[0][0], 0.9 * m1);
        assert_eq!(st.v[0][0], 0.999 * v1);
        // first moment still carries momentum, so the parameter keeps moving;
        // from a fresh state a zero gradient leaves it untouched
        assert!(p.0.data[0] < before);
        let mut q = scalar(0.5);
        let mut fresh = AdamState::default();
        adam_step(&mut q, &scalar(0.0), &mut fresh, 1e-3).unwrap();
        assert_eq!(q.0.data[0], 0.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; bias correction gives m̂ = v̂ = 1
        let mut p = scalar(0.0);
        let mut st = AdamState::default();
        adam_step(&mut p, &scalar(1.0), &mut st, 1e-4).unwrap();
        let expected = 1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((p.0.data[0] + expected).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut p = scalar(0.25);
        let mut st = AdamState::default();
        assert!(adam_step(&mut p, &scalar(f64::NAN), &mut st, 1e-3).is_err());
        assert_eq!(p.0.data[0], 0.25);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut p = scalar(1.0);
            let mut st = AdamState::default();
            for k in 0..100 {
                let g = scalar((k as f64 * 0.37).sin() + p.0.data[0]);
                adam_step(&mut p, &g, &mut st, 1e-2).unwrap();
            }
            p.0.data[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
