use rand::Rng;

use super::{backward_unchecked, cell_forward, CellKind, CellSpec, Mat, ParamTensor, Saved, Trainable};
use crate::error::{Error, Result};

/// One cell, or two stacked cells whose first keeps the input width.
#[derive(Clone, Debug, PartialEq)]
pub struct CellStack {
    pub cells: Vec<ParamTensor>,
}

pub struct StackForward {
    /// Hidden sequence of the last cell, `T x units`.
    pub hs: Mat,
    saved: Vec<Saved>,
}

pub struct StackGrads {
    pub stack: CellStack,
    pub dxs: Mat,
}

impl CellStack {
    pub fn specs(kind: CellKind, input_dim: usize, units: usize, stacked: bool) -> Result<Vec<CellSpec>> {
        let last = CellSpec::new(kind, input_dim, units)?;
        Ok(if stacked {
            vec![CellSpec::new(kind, input_dim, input_dim)?, last]
        } else {
            vec![last]
        })
    }

    pub fn init(kind: CellKind, input_dim: usize, units: usize, stacked: bool, rng: &mut impl Rng) -> Result<Self> {
        let cells = Self::specs(kind, input_dim, units, stacked)?
            .into_iter()
            .map(|s| ParamTensor::init(s, rng))
            .collect();
        Ok(Self { cells })
    }

    pub fn zeros(kind: CellKind, input_dim: usize, units: usize, stacked: bool) -> Result<Self> {
        let cells = Self::specs(kind, input_dim, units, stacked)?
            .into_iter()
            .map(ParamTensor::zeros)
            .collect();
        Ok(Self { cells })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cells: self.cells.iter().map(|c| c.zeros_like()).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.cells[0].spec.input_dim
    }

    pub fn units(&self) -> usize {
        self.cells.last().unwrap().spec.units
    }

    pub fn forward(&self, xs: &Mat) -> Result<StackForward> {
        let mut saved = Vec::with_capacity(self.cells.len());
        let mut cur = xs.clone();
        for cell in &self.cells {
            let out = cell_forward(cell, &cur, None)?;
            cur = out.hs;
            saved.push(out.saved);
        }
        Ok(StackForward { hs: cur, saved })
    }

    pub fn backward(&self, fwd: &StackForward, dhs: &Mat) -> Result<StackGrads> {
        if fwd.saved.len() != self.cells.len() {
            return Err(Error::StaleActivations);
        }
        let mut grads = Vec::with_capacity(self.cells.len());
        let mut d = dhs.clone();
        for (cell, saved) in self.cells.iter().zip(&fwd.saved).rev() {
            if saved.spec() != cell.spec {
                return Err(Error::StaleActivations);
            }
            let g = backward_unchecked(cell, saved, &d, None)?;
            d = g.dxs;
            grads.push(g.params);
        }
        grads.reverse();
        Ok(StackGrads {
            stack: CellStack { cells: grads },
            dxs: d,
        })
    }
}

impl Trainable for CellStack {
    fn tensors(&self) -> Vec<&Mat> {
        self.cells.iter().flat_map(|c| c.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        self.cells.iter_mut().flat_map(|c| c.tensors_mut()).collect()
    }
}
