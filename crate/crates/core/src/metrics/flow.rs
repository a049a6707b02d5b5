use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Pyramidal Lucas-Kanade settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Evaluation grid is `grid × grid` cell centres.
    pub grid: usize,
    /// Odd window side length.
    pub window: usize,
    pub levels: usize,
    pub max_iters: usize,
    /// Stop refining once an update is shorter than this (pixels).
    pub epsilon: f64,
    /// Windows whose structure tensor has a smaller eigenvalue than this
    /// (per pixel, intensities in [0, 1]) are textureless.
    pub min_eigen: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            window: 5,
            levels: 3,
            max_iters: 10,
            epsilon: 0.01,
            min_eigen: 1e-6,
        }
    }
}

/// Displacements (pixels/frame) at the centres of a `grid × grid` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub grid: usize,
    pub width: usize,
    pub height: usize,
    /// Row-major over grid cells.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// `false` where the window was textureless and the flow was zeroed.
    pub confident: Vec<bool>,
}

impl FlowField {
    /// Image position of grid cell `(gx, gy)`.
    pub fn point(&self, gx: usize, gy: usize) -> (f64, f64) {
        grid_point(self.width, self.height, self.grid, gx, gy)
    }

    pub fn zeros(grid: usize, width: usize, height: usize) -> Self {
        let n = grid * grid;
        Self {
            grid,
            width,
            height,
            u: vec![0.0; n],
            v: vec![0.0; n],
            confident: vec![true; n],
        }
    }
}

fn grid_point(w: usize, h: usize, g: usize, gx: usize, gy: usize) -> (f64, f64) {
    (
        (gx as f64 + 0.5) * w as f64 / g as f64 - 0.5,
        (gy as f64 + 0.5) * h as f64 / g as f64 - 0.5,
    )
}

struct Image {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Image {
    fn at(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.data[y * self.w + x]
    }

    /// Bilinear sample with clamp-to-edge.
    fn sample(&self, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as isize, y0 as isize);
        let a = self.at(xi, yi) * (1.0 - fx) + self.at(xi + 1, yi) * fx;
        let b = self.at(xi, yi + 1) * (1.0 - fx) + self.at(xi + 1, yi + 1) * fx;
        a * (1.0 - fy) + b * fy
    }

    /// Blur with [1 2 1]/4 in both directions, then take every second pixel.
    fn downsample(&self) -> Image {
        let (w2, h2) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let mut data = Vec::with_capacity(w2 * h2);
        for y in 0..h2 {
            for x in 0..w2 {
                let (cx, cy) = (2 * x as isize, 2 * y as isize);
                let mut s = 0.0;
                for (dy, wy) in [(-1, 1.0), (0, 2.0), (1, 1.0)] {
                    for (dx, wx) in [(-1, 1.0), (0, 2.0), (1, 1.0)] {
                        s += wy * wx * self.at(cx + dx, cy + dy);
                    }
                }
                data.push(s / 16.0);
            }
        }
        Image { w: w2, h: h2, data }
    }
}

fn pyramid(frame: &[f32], w: usize, h: usize, levels: usize) -> Vec<Image> {
    let mut out = vec![Image {
        w,
        h,
        data: frame.iter().map(|v| *v as f64).collect(),
    }];
    while out.len() < levels {
        let next = out.last().unwrap().downsample();
        out.push(next);
    }
    out
}

/// Refine the displacement of one point at one pyramid level. Returns the
/// new guess and whether the window had enough texture.
fn lk_point(prev: &Image, next: &Image, px: f64, py: f64, guess: (f64, f64), cfg: &FlowConfig) -> ((f64, f64), bool) {
    let r = (cfg.window / 2) as isize;
    let mut pts = Vec::with_capacity(cfg.window * cfg.window);
    let (mut gxx, mut gxy, mut gyy) = (0.0, 0.0, 0.0);
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (px + dx as f64, py + dy as f64);
            let ix = (prev.sample(x + 1.0, y) - prev.sample(x - 1.0, y)) / 2.0;
            let iy = (prev.sample(x, y + 1.0) - prev.sample(x, y - 1.0)) / 2.0;
            gxx += ix * ix;
            gxy += ix * iy;
            gyy += iy * iy;
            pts.push((x, y, prev.sample(x, y), ix, iy));
        }
    }
    let n = pts.len() as f64;
    let tr = gxx + gyy;
    let det = gxx * gyy - gxy * gxy;
    let min_eig = tr / 2.0 - ((tr / 2.0).powi(2) - det).max(0.0).sqrt();
    if min_eig / n < cfg.min_eigen {
        return (guess, false);
    }
    let (mut u, mut v) = guess;
    for _ in 0..cfg.max_iters {
        let (mut bx, mut by) = (0.0, 0.0);
        for &(x, y, i0, ix, iy) in &pts {
            let diff = i0 - next.sample(x + u, y + v);
            bx += diff * ix;
            by += diff * iy;
        }
        let du = (gyy * bx - gxy * by) / det;
        let dv = (gxx * by - gxy * bx) / det;
        u += du;
        v += dv;
        if du.hypot(dv) < cfg.epsilon {
            break;
        }
    }
    ((u, v), true)
}

/// Coarse-to-fine Lucas-Kanade flow from `prev` to `next` (grayscale,
/// row-major `w × h`) evaluated on the configured grid.
pub fn dense_flow(prev: &[f32], next: &[f32], w: usize, h: usize, cfg: &FlowConfig) -> Result<FlowField, MetricsError> {
    if prev.len() != w * h || next.len() != w * h {
        return Err(MetricsError::Shape(format!(
            "frames of {} and {} values for {w}x{h}",
            prev.len(),
            next.len()
        )));
    }
    if cfg.grid == 0 || cfg.levels == 0 || cfg.window % 2 == 0 || w < 2 || h < 2 {
        return Err(MetricsError::Shape("invalid flow configuration".into()));
    }
    let pa = pyramid(prev, w, h, cfg.levels);
    let pb = pyramid(next, w, h, cfg.levels);
    let mut field = FlowField::zeros(cfg.grid, w, h);
    for gy in 0..cfg.grid {
        for gx in 0..cfg.grid {
            let (x, y) = grid_point(w, h, cfg.grid, gx, gy);
            let mut d = (0.0, 0.0);
            let mut ok = false;
            for level in (0..cfg.levels).rev() {
                let s = (1u32 << level) as f64;
                // Pixel centres map as (x + 0.5) / s - 0.5 between levels.
                let (lx, ly) = ((x + 0.5) / s - 0.5, (y + 0.5) / s - 0.5);
                let (nd, textured) = lk_point(&pa[level], &pb[level], lx, ly, d, cfg);
                d = nd;
                ok = textured;
                if level > 0 {
                    d = (2.0 * d.0, 2.0 * d.1);
                }
            }
            let i = gy * cfg.grid + gx;
            if ok {
                field.u[i] = d.0;
                field.v[i] = d.1;
            } else {
                field.confident[i] = false;
            }
        }
    }
    Ok(field)
}
