//! Dense optical flow and the pooling front-end of the relative pose network.

mod io;
mod lk;

pub use io::{read_flow, read_pgm, write_flow, write_pgm};
pub use lk::{lucas_kanade, lucas_kanade_with, LkParams};

use crate::error::{Error, Result};

/// Grayscale image, row-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyInput);
        }
        if pixels.len() != width * height {
            return Err(Error::LengthMismatch {
                expected: width * height,
                got: pixels.len(),
            });
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("non-finite pixel"));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64 + Sync + Send) -> Result<Self> {
        let mut pixels = vec![0.0; width * height];
        if width > 0 {
            crate::par::for_each_row(&mut pixels, width, |y, row| {
                for (x, p) in row.iter_mut().enumerate() {
                    *p = f(x, y);
                }
            });
        }
        Image::new(width, height, pixels)
    }

    /// Luminance of interleaved 8-bit RGB.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * width * height {
            return Err(Error::LengthMismatch {
                expected: 3 * width * height,
                got: rgb.len(),
            });
        }
        let pixels = rgb
            .chunks_exact(3)
            .map(|c| (0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64) / 255.0)
            .collect();
        Image::new(width, height, pixels)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Bilinear sample with edge replication.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        bilinear(&self.pixels, self.width, self.height, x, y)
    }

    /// Half-resolution image by 2×2 averaging.
    pub(crate) fn downsample(&self) -> Image {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut pixels = vec![0.0; w * h];
        crate::par::for_each_row(&mut pixels, w, |y, row| {
            for (x, p) in row.iter_mut().enumerate() {
                *p = 0.25
                    * (self.at(2 * x, 2 * y)
                        + self.at(2 * x + 1, 2 * y)
                        + self.at(2 * x, 2 * y + 1)
                        + self.at(2 * x + 1, 2 * y + 1));
            }
        });
        Image { width: w, height: h, pixels }
    }
}

pub(crate) fn bilinear(data: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = data[y0 * width + x0] * (1.0 - fx) + data[y0 * width + x1] * fx;
    let bot = data[y1 * width + x0] * (1.0 - fx) + data[y1 * width + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Per-pixel displacement from one frame to the next, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Pixels whose estimate is unreliable (flat texture or out-of-frame).
    pub low_confidence: Vec<bool>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        FlowField {
            width,
            height,
            u: vec![0.0; n],
            v: vec![0.0; n],
            low_confidence: vec![false; n],
        }
    }

    pub fn new(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        for c in [&u, &v] {
            if c.len() != n {
                return Err(Error::LengthMismatch { expected: n, got: c.len() });
            }
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite flow"));
        }
        Ok(FlowField {
            width,
            height,
            u,
            v,
            low_confidence: vec![false; n],
        })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Channel 0 is `u`, channel 1 is `v`.
    pub fn channel(&self, c: usize) -> &[f64] {
        if c == 0 {
            &self.u
        } else {
            &self.v
        }
    }
}

/// Non-overlapping `k × k` block mean of each channel.
///
/// A block is marked low-confidence when more than half its pixels are.
pub fn mean_pool(field: &FlowField, k: usize) -> Result<FlowField> {
    if k == 0 || !field.width.is_multiple_of(k) || !field.height.is_multiple_of(k) {
        return Err(Error::invalid(format!(
            "pool size {k} does not divide {}x{}",
            field.width, field.height
        )));
    }
    let (w, h) = (field.width / k, field.height / k);
    let pool = |src: &[f64]| {
        let mut out = vec![0.0; w * h];
        crate::par::for_each_row(&mut out, w, |by, row| {
            for (bx, o) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for y in by * k..(by + 1) * k {
                    for x in bx * k..(bx + 1) * k {
                        s += src[y * field.width + x];
                    }
                }
                *o = s / (k * k) as f64;
            }
        });
        out
    };
    let mut low = vec![false; w * h];
    for (i, l) in low.iter_mut().enumerate() {
        let (bx, by) = (i % w, i / w);
        let mut n = 0;
        for y in by * k..(by + 1) * k {
            for x in bx * k..(bx + 1) * k {
                n += field.low_confidence[y * field.width + x] as usize;
            }
        }
        *l = 2 * n > k * k;
    }
    Ok(FlowField {
        width: w,
        height: h,
        u: pool(&field.u),
        v: pool(&field.v),
        low_confidence: low,
    })
}

#[cfg(test)]
mod tests;
