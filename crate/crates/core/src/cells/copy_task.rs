//! Copy-memory probe: memorize a short symbol prefix, wait through a blank
//! delay, then reproduce the prefix after a trigger token.
//!
//! Tokens: `0` blank, `1..=n_symbols` symbols, `n_symbols + 1` trigger.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{adam_step, mean_gradient, AdamState, CellKind, CellStack, Linear, Mat, TrainConfig, Trainable};
use crate::error::{Error, Result};
use crate::par;

/// Length of the prefix that must be copied.
pub const PREFIX_LEN: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct CopyBatch {
    pub n_symbols: usize,
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl CopyBatch {
    pub fn trigger(&self) -> usize {
        self.n_symbols + 1
    }

    /// One-hot encoding of sample `i`, width `n_symbols + 2`.
    pub fn one_hot(&self, i: usize) -> Mat {
        let width = self.n_symbols + 2;
        let seq = &self.inputs[i];
        let mut m = Mat::zeros(seq.len(), width);
        for (t, tok) in seq.iter().enumerate() {
            m.data[t * width + tok] = 1.0;
        }
        m
    }
}

/// `batch` sequences of length `delay + 2·PREFIX_LEN`.
pub fn copy_memory_batch(delay: usize, n_symbols: usize, batch: usize, seed: u64) -> Result<CopyBatch> {
    if delay == 0 {
        return Err(Error::invalid("delay must be >= 1"));
    }
    if n_symbols == 0 {
        return Err(Error::invalid("need at least one symbol"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = delay + 2 * PREFIX_LEN;
    let mut inputs = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    for _ in 0..batch {
        let prefix: Vec<usize> = (0..PREFIX_LEN).map(|_| rng.random_range(1..=n_symbols)).collect();
        let mut x = vec![0; len];
        x[..PREFIX_LEN].copy_from_slice(&prefix);
        x[PREFIX_LEN + delay - 1] = n_symbols + 1;
        let mut y = vec![0; len];
        y[len - PREFIX_LEN..].copy_from_slice(&prefix);
        inputs.push(x);
        targets.push(y);
    }
    Ok(CopyBatch {
        n_symbols,
        inputs,
        targets,
    })
}

/// Cross-entropy of a memoryless predictor: blanks are certain, the copied
/// symbols are guessed uniformly.
pub fn memoryless_loss(delay: usize, n_symbols: usize) -> f64 {
    PREFIX_LEN as f64 * (n_symbols as f64).ln() / (delay + 2 * PREFIX_LEN) as f64
}

#[derive(Clone, Debug)]
pub struct CopyTaskReport {
    pub kind: CellKind,
    pub stacked: bool,
    pub losses: Vec<f64>,
    /// Accuracy on the copied positions of a held-out batch.
    pub copy_accuracy: f64,
}

struct CopyModel {
    stack: CellStack,
    head: Linear,
}

impl Trainable for CopyModel {
    fn tensors(&self) -> Vec<&Mat> {
        let mut v = self.stack.tensors();
        v.extend(self.head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = self.stack.tensors_mut();
        v.extend(self.head.tensors_mut());
        v
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Trains a cell stack with a per-step softmax head on freshly sampled
/// batches, returning the per-iteration mean cross-entropy.
pub fn train_copy_task(
    kind: CellKind,
    stacked: bool,
    units: usize,
    delay: usize,
    n_symbols: usize,
    config: &TrainConfig,
) -> Result<CopyTaskReport> {
    config.validate()?;
    let width = n_symbols + 2;
    let classes = n_symbols + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = CopyModel {
        stack: CellStack::init(kind, width, units, stacked, &mut rng)?,
        head: Linear::init(units, classes, &mut rng),
    };
    let mut adam = AdamState::default();
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let batch = copy_memory_batch(delay, n_symbols, config.batch_size, config.seed.wrapping_add(1 + it as u64))?;
        let per_sample = par::map_range(batch.inputs.len(), |i| -> Result<(f64, CopyModel)> {
            let xs = batch.one_hot(i);
            let fwd = model.stack.forward(&xs)?;
            let t_len = xs.rows;
            let mut g_head = Linear::zeros(units, classes);
            let mut dhs = Mat::zeros(t_len, units);
            let mut loss = 0.0;
            for t in 0..t_len {
                let h = fwd.hs.row(t);
                let p = softmax(&model.head.forward(h));
                let y = batch.targets[i][t];
                loss -= p[y].max(1e-300).ln();
                let mut dz = p;
                dz[y] -= 1.0;
                dz.iter_mut().for_each(|v| *v /= t_len as f64);
                let dh = model.head.backward(h, &dz, &mut g_head);
                dhs.row_mut(t).copy_from_slice(&dh);
            }
            let g = model.stack.backward(&fwd, &dhs)?;
            Ok((
                loss / t_len as f64,
                CopyModel {
                    stack: g.stack,
                    head: g_head,
                },
            ))
        });
        let (loss, grad) = mean_gradient(per_sample)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("copy task loss at iteration {it}")));
        }
        losses.push(loss);
        adam_step(&mut model, &grad, &mut adam, config.learning_rate)?;
    }

    let eval = copy_memory_batch(delay, n_symbols, 64, config.seed ^ 0x9e37_79b9)?;
    let mut hits = 0usize;
    for i in 0..eval.inputs.len() {
        let fwd = model.stack.forward(&eval.one_hot(i))?;
        let len = eval.inputs[i].len();
        for t in len - PREFIX_LEN..len {
            let z = model.head.forward(fwd.hs.row(t));
            let arg = (0..classes).max_by(|a, b| z[*a].total_cmp(&z[*b])).unwrap();
            hits += (arg == eval.targets[i][t]) as usize;
        }
    }
    Ok(CopyTaskReport {
        kind,
        stacked,
        losses,
        copy_accuracy: hits as f64 / (eval.inputs.len() * PREFIX_LEN) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_reproducible_and_well_formed() {
        let a = copy_memory_batch(5, 8, 16, 42).unwrap();
        assert_eq!(a, copy_memory_batch(5, 8, 16, 42).unwrap());
        assert_ne!(a, copy_memory_batch(5, 8, 16, 43).unwrap());
        for (x, y) in a.inputs.iter().zip(&a.targets) {
            assert_eq!(x.len(), 5 + 2 * PREFIX_LEN);
            let trig = x.iter().position(|&t| t == a.trigger()).unwrap();
            assert_eq!(trig, PREFIX_LEN + 5 - 1);
            assert!(y[..=trig].iter().all(|&t| t == 0));
            assert_eq!(&y[y.len() - PREFIX_LEN..], &x[..PREFIX_LEN]);
        }
        assert!(copy_memory_batch(0, 8, 1, 0).is_err());
    }

    #[test]
    fn symbol_histogram_is_uniform() {
        let n = 8;
        let b = copy_memory_batch(3, n, 1000, 7).unwrap();
        let mut counts = vec![0usize; n + 1];
        for x in &b.inputs {
            for &t in &x[..PREFIX_LEN] {
                counts[t] += 1;
            }
        }
        let total = (1000 * PREFIX_LEN) as f64;
        let p = 1.0 / n as f64;
        let sigma = (total * p * (1.0 - p)).sqrt();
        assert_eq!(counts[0], 0);
        for c in &counts[1..] {
            assert!((*c as f64 - total * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn training_reduces_loss_below_initial() {
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 8,
            iterations: 60,
            seed: 1,
        };
        let r = train_copy_task(CellKind::Gru, false, 8, 4, 4, &cfg).unwrap();
        let head: f64 = r.losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = r.losses[r.losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < 0.5 * head, "{head} -> {tail}");
    }
}
