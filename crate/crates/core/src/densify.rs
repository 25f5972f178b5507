//! Sparse-to-dense interpolation: every missing pixel takes a bilateral
//! weighted average of its nearest valid seeds.

use rayon::prelude::*;
use thiserror::Error;

use crate::types::{FlowField, GrayImage};

#[derive(Debug, Error, PartialEq)]
pub enum DensifyError {
    #[error("sparse flow has no valid pixels")]
    NoSeeds,
    #[error("flow is {0}x{1} but image is {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("neighbour count must be at least 1")]
    ZeroNeighbours,
    #[error("scales must be positive (spatial {0}, intensity {1})")]
    BadScale(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensifyParams {
    pub neighbours: usize,
    /// Spatial scale in pixels.
    pub sigma_s: f64,
    /// Intensity scale in luminance units.
    pub sigma_c: f64,
}

impl Default for DensifyParams {
    fn default() -> Self {
        Self {
            neighbours: 16,
            sigma_s: 15.0,
            sigma_c: 0.08,
        }
    }
}

impl DensifyParams {
    pub fn validate(&self) -> Result<(), DensifyError> {
        if self.neighbours == 0 {
            return Err(DensifyError::ZeroNeighbours);
        }
        if !(self.sigma_s > 0.0 && self.sigma_c > 0.0) {
            return Err(DensifyError::BadScale(self.sigma_s, self.sigma_c));
        }
        Ok(())
    }
}

const CELL: usize = 16;

/// Bucket grid over seed positions for nearest-neighbour queries.
struct SeedGrid {
    cols: usize,
    rows: usize,
    cells: Vec<Vec<u32>>,
    xs: Vec<i64>,
    ys: Vec<i64>,
}

impl SeedGrid {
    fn new(flow: &FlowField) -> Self {
        let cols = flow.width().div_ceil(CELL);
        let rows = flow.height().div_ceil(CELL);
        let mut cells = vec![Vec::new(); cols * rows];
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for y in 0..flow.height() {
            for x in 0..flow.width() {
                if flow.is_valid(x, y) {
                    cells[(y / CELL) * cols + x / CELL].push(xs.len() as u32);
                    xs.push(x as i64);
                    ys.push(y as i64);
                }
            }
        }
        Self { cols, rows, cells, xs, ys }
    }

    fn len(&self) -> usize {
        self.xs.len()
    }

    /// The `k` seeds closest to `(x, y)` as `(squared distance, seed)`,
    /// ties broken by seed order.
    fn nearest(&self, x: usize, y: usize, k: usize, out: &mut Vec<(i64, u32)>) {
        out.clear();
        let k = k.min(self.len());
        let (cx, cy) = ((x / CELL) as i64, (y / CELL) as i64);
        let max_ring = self.cols.max(self.rows) as i64;
        for ring in 0..=max_ring {
            for gy in cy - ring..=cy + ring {
                for gx in cx - ring..=cx + ring {
                    if (gx - cx).abs() != ring && (gy - cy).abs() != ring {
                        continue;
                    }
                    if gx < 0 || gy < 0 || gx >= self.cols as i64 || gy >= self.rows as i64 {
                        continue;
                    }
                    for &s in &self.cells[gy as usize * self.cols + gx as usize] {
                        let dx = self.xs[s as usize] - x as i64;
                        let dy = self.ys[s as usize] - y as i64;
                        out.push((dx * dx + dy * dy, s));
                    }
                }
            }
            if out.len() >= k {
                out.sort_unstable();
                let reach = ring * CELL as i64;
                if out[k - 1].0 <= reach * reach {
                    break;
                }
            }
        }
        out.sort_unstable();
        out.truncate(k);
    }
}

/// Fills every invalid pixel of `sparse`; valid pixels pass through.
pub fn densify(sparse: &FlowField, img: &GrayImage, params: &DensifyParams) -> Result<FlowField, DensifyError> {
    params.validate()?;
    let (w, h) = (sparse.width(), sparse.height());
    if (w, h) != (img.width(), img.height()) {
        return Err(DensifyError::SizeMismatch(w, h, img.width(), img.height()));
    }
    let grid = SeedGrid::new(sparse);
    if grid.len() == 0 {
        return Err(DensifyError::NoSeeds);
    }
    let rows: Vec<Vec<(f64, f64)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut near = Vec::new();
            let mut logw = Vec::new();
            (0..w)
                .map(|x| {
                    if sparse.is_valid(x, y) {
                        return sparse.get(x, y);
                    }
                    grid.nearest(x, y, params.neighbours, &mut near);
                    let ip = img.get(x, y);
                    logw.clear();
                    logw.extend(near.iter().map(|&(d2, s)| {
                        let (sx, sy) = (grid.xs[s as usize] as usize, grid.ys[s as usize] as usize);
                        -(d2 as f64).sqrt() / params.sigma_s - (ip - img.get(sx, sy)).abs() / params.sigma_c
                    }));
                    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let (mut su, mut sv, mut sw) = (0.0, 0.0, 0.0);
                    for (&(_, s), &lw) in near.iter().zip(&logw) {
                        let wt = (lw - top).exp();
                        let (u, v) = sparse.get(grid.xs[s as usize] as usize, grid.ys[s as usize] as usize);
                        su += wt * u;
                        sv += wt * v;
                        sw += wt;
                    }
                    (su / sw, sv / sw)
                })
                .collect()
        })
        .collect();
    let (u, v): (Vec<f64>, Vec<f64>) = rows.into_iter().flatten().unzip();
    Ok(FlowField::new(w, h, u, v, vec![true; w * h]).expect("consistent sizes"))
}
