use super::{bilinear, FlowField, Image};
use crate::error::{Error, Result};
use crate::par;

/// Lucas-Kanade tuning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LkParams {
    /// Odd side length of the aggregation window.
    pub window: usize,
    /// Pyramid depth; 1 means a single full-resolution level.
    pub levels: usize,
    /// Threshold on the smallest eigenvalue of the window-mean structure tensor.
    pub tau: f64,
    /// Maximum Gauss-Newton refinements per pixel and pyramid level.
    pub iterations: usize,
}

impl Default for LkParams {
    fn default() -> Self {
        LkParams {
            window: 15,
            levels: 3,
            tau: 1e-4,
            iterations: 10,
        }
    }
}

pub fn lucas_kanade(prev: &Image, next: &Image, window: usize, levels: usize) -> Result<FlowField> {
    lucas_kanade_with(
        prev,
        next,
        &LkParams {
            window,
            levels,
            ..LkParams::default()
        },
    )
}

/// Dense coarse-to-fine Lucas-Kanade.
pub fn lucas_kanade_with(prev: &Image, next: &Image, params: &LkParams) -> Result<FlowField> {
    if prev.width != next.width || prev.height != next.height {
        return Err(Error::shape(format!(
            "{}x{} vs {}x{}",
            prev.width, prev.height, next.width, next.height
        )));
    }
    let LkParams { window, levels, tau, iterations } = *params;
    if window < 3 || window % 2 == 0 {
        return Err(Error::invalid(format!("window must be odd and >= 3, got {window}")));
    }
    if levels == 0 {
        return Err(Error::invalid("levels must be >= 1"));
    }
    let coarse = prev.width.min(prev.height) >> (levels - 1);
    if coarse < window {
        return Err(Error::invalid(format!(
            "coarsest pyramid level ({coarse} px) is smaller than the window ({window})"
        )));
    }

    let mut pyr = vec![(prev.clone(), next.clone())];
    for _ in 1..levels {
        let (a, b) = pyr.last().unwrap();
        pyr.push((a.downsample(), b.downsample()));
    }

    let mut flow: Option<FlowField> = None;
    for (lvl, (a, b)) in pyr.iter().enumerate().rev() {
        let mut f = match flow {
            None => FlowField::zeros(a.width, a.height),
            Some(coarser) => upsample(&coarser, a.width, a.height),
        };
        refine_level(a, b, &mut f, window, tau, iterations, lvl == 0);
        flow = Some(f);
    }
    Ok(flow.unwrap())
}

fn upsample(f: &FlowField, width: usize, height: usize) -> FlowField {
    let mut out = FlowField::zeros(width, height);
    for (dst, src) in [(&mut out.u, &f.u), (&mut out.v, &f.v)] {
        par::for_each_row(dst, width, |y, row| {
            let sy = (y as f64 + 0.5) * 0.5 - 0.5;
            for (x, o) in row.iter_mut().enumerate() {
                let sx = (x as f64 + 0.5) * 0.5 - 0.5;
                *o = 2.0 * bilinear(src, f.width, f.height, sx, sy);
            }
        });
    }
    out
}

fn gradients(img: &Image) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width, img.height);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    par::for_each_row(&mut gx, w, |y, row| {
        for (x, g) in row.iter_mut().enumerate() {
            let (l, r) = (x.saturating_sub(1), (x + 1).min(w - 1));
            *g = (img.at(r, y) - img.at(l, y)) / (r - l) as f64;
        }
    });
    par::for_each_row(&mut gy, w, |y, row| {
        let (t, b) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for (x, g) in row.iter_mut().enumerate() {
            *g = (img.at(x, b) - img.at(x, t)) / (b - t) as f64;
        }
    });
    (gx, gy)
}

/// Summed-area table with a zero first row and column.
struct Integral {
    stride: usize,
    data: Vec<f64>,
}

impl Integral {
    fn new(values: &[f64], w: usize, h: usize) -> Self {
        let stride = w + 1;
        let mut data = vec![0.0; stride * (h + 1)];
        for y in 0..h {
            let mut run = 0.0;
            for x in 0..w {
                run += values[y * w + x];
                data[(y + 1) * stride + x + 1] = data[y * stride + x + 1] + run;
            }
        }
        Integral { stride, data }
    }

    /// Sum over the inclusive box `[x0, x1] × [y0, y1]`.
    fn sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = self.stride;
        self.data[(y1 + 1) * s + x1 + 1] - self.data[y0 * s + x1 + 1] - self.data[(y1 + 1) * s + x0]
            + self.data[y0 * s + x0]
    }
}

fn refine_level(
    a: &Image,
    b: &Image,
    flow: &mut FlowField,
    window: usize,
    tau: f64,
    iterations: usize,
    finest: bool,
) {
    let (w, h) = (a.width, a.height);
    let r = window / 2;
    let area = (window * window) as f64;
    let (gx, gy) = gradients(a);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let sxx = Integral::new(&prod(&gx, &gx), w, h);
    let sxy = Integral::new(&prod(&gx, &gy), w, h);
    let syy = Integral::new(&prod(&gy, &gy), w, h);

    // Inverse structure tensor per interior pixel; None when ill-conditioned.
    let mut inv: Vec<Option<[f64; 3]>> = vec![None; w * h];
    par::for_each_row(&mut inv, w, |y, row| {
        if y < r || y + r >= h {
            return;
        }
        for x in r..w - r {
            let axx = sxx.sum(x - r, y - r, x + r, y + r) / area;
            let axy = sxy.sum(x - r, y - r, x + r, y + r) / area;
            let ayy = syy.sum(x - r, y - r, x + r, y + r) / area;
            let tr = 0.5 * (axx + ayy);
            let disc = (0.25 * (axx - ayy).powi(2) + axy * axy).sqrt();
            if tr - disc >= tau {
                let det = axx * ayy - axy * axy;
                row[x] = Some([ayy / det, -axy / det, axx / det]);
            }
        }
    });

    // Per-pixel Gauss-Newton with the whole window warped by that pixel's flow.
    let mut est: Vec<(f64, f64)> = flow.u.iter().zip(&flow.v).map(|(u, v)| (*u, *v)).collect();
    par::for_each_row(&mut est, w, |y, row| {
        if y < r || y + r >= h {
            return;
        }
        for x in r..w - r {
            let Some([ixx, ixy, iyy]) = inv[y * w + x] else {
                continue;
            };
            let (mut u, mut v) = row[x];
            for _ in 0..iterations {
                let (mut ex, mut ey) = (0.0, 0.0);
                for wy in y - r..=y + r {
                    for wx in x - r..=x + r {
                        let i = wy * w + wx;
                        let e = b.sample(wx as f64 + u, wy as f64 + v) - a.pixels[i];
                        ex += gx[i] * e;
                        ey += gy[i] * e;
                    }
                }
                let (ex, ey) = (-ex / area, -ey / area);
                let (du, dv) = (ixx * ex + ixy * ey, ixy * ex + iyy * ey);
                u += du;
                v += dv;
                if du * du + dv * dv < 1e-6 {
                    break;
                }
            }
            row[x] = (u, v);
        }
    });
    for (i, (u, v)) in est.into_iter().enumerate() {
        flow.u[i] = u;
        flow.v[i] = v;
    }
    fill_border(flow, r);

    if finest {
        for y in 0..h {
            for x in 0..w {
                let cx = x.clamp(r, w - 1 - r);
                let cy = y.clamp(r, h - 1 - r);
                let low = inv[cy * w + cx].is_none();
                let i = y * w + x;
                flow.low_confidence[i] = low;
                if low {
                    flow.u[i] = 0.0;
                    flow.v[i] = 0.0;
                }
            }
        }
    }
}

/// Copies the nearest interior estimate into the `r`-wide border.
fn fill_border(flow: &mut FlowField, r: usize) {
    let (w, h) = (flow.width, flow.height);
    for y in 0..h {
        let cy = y.clamp(r, h - 1 - r);
        for x in 0..w {
            if y >= r && y + r < h && x >= r && x + r < w {
                continue;
            }
            let src = cy * w + x.clamp(r, w - 1 - r);
            flow.u[y * w + x] = flow.u[src];
            flow.v[y * w + x] = flow.v[src];
        }
    }
}
