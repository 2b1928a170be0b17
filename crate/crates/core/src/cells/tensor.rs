use crate::error::{Error, Result};

/// Dense row-major `f64` matrix; vectors are stored as `n x 1`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `out[i] += Σ_j m[row0 + i, j] · x[j]` for `i < out.len()`.
#[inline]
pub(crate) fn gemv_add(m: &Mat, row0: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.cols, x.len());
    for (i, o) in out.iter_mut().enumerate() {
        let row = m.row(row0 + i);
        let mut acc = 0.0;
        for (w, v) in row.iter().zip(x) {
            acc += w * v;
        }
        *o += acc;
    }
}

/// `out[j] += Σ_i m[row0 + i, j] · d[i]`.
#[inline]
pub(crate) fn gemv_t_add(m: &Mat, row0: usize, d: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.cols, out.len());
    for (i, di) in d.iter().enumerate() {
        if *di == 0.0 {
            continue;
        }
        let row = m.row(row0 + i);
        for (o, w) in out.iter_mut().zip(row) {
            *o += w * di;
        }
    }
}

/// `g[row0 + i, j] += d[i] · x[j]`.
#[inline]
pub(crate) fn outer_add(g: &mut Mat, row0: usize, d: &[f64], x: &[f64]) {
    debug_assert_eq!(g.cols, x.len());
    for (i, di) in d.iter().enumerate() {
        if *di == 0.0 {
            continue;
        }
        let row = g.row_mut(row0 + i);
        for (o, v) in row.iter_mut().zip(x) {
            *o += di * v;
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
