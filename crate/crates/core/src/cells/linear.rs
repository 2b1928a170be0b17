use rand::Rng;

use super::{gemv_add, gemv_t_add, outer_add, Mat, Trainable};

/// Affine layer `y = W x + b` with no activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Mat,
    pub b: Mat,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: Mat::zeros(outputs, inputs),
            b: Mat::zeros(outputs, 1),
        }
    }

    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let mut l = Self::zeros(inputs, outputs);
        let a = 1.0 / (inputs as f64).sqrt();
        l.w.data.iter_mut().for_each(|x| *x = rng.random_range(-a..a));
        l
    }

    pub fn inputs(&self) -> usize {
        self.w.cols
    }

    pub fn outputs(&self) -> usize {
        self.w.rows
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.data.clone();
        gemv_add(&self.w, 0, x, &mut y);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        outer_add(&mut grad.w, 0, dy, x);
        grad.b.data.iter_mut().zip(dy).for_each(|(b, d)| *b += d);
        let mut dx = vec![0.0; x.len()];
        gemv_t_add(&self.w, 0, dy, &mut dx);
        dx
    }
}

impl Trainable for Linear {
    fn tensors(&self) -> Vec<&Mat> {
        vec![&self.w, &self.b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.w, &mut self.b]
    }
}
