//! Synthetic frame pairs with exact ground-truth flow.
//!
//! Frame 1 is multi-octave value noise. Frame 2 is frame 1 warped by one of
//! three motion models. For the region model, frame 1 is split into Voronoi
//! cells that each translate rigidly; faster cells are composited on top,
//! uncovered frame-2 pixels show fresh background texture, and occluded or
//! out-of-frame source pixels have invalid ground truth.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::DataError;
use crate::types::{FlowField, GrayImage};

/// Edges of the displacement strata that region magnitudes are spread over.
const STRATA: [f64; 8] = [0.0, 5.0, 10.0, 20.0, 30.0, 45.0, 60.0, 90.0];
const MIN_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DisplacementModel {
    Translation { u: f64, v: f64 },
    Regions { count: usize },
    Zoom { scale: f64 },
}

impl fmt::Display for DisplacementModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DisplacementModel::Translation { u, v } => write!(f, "translation:{u},{v}"),
            DisplacementModel::Regions { count } => write!(f, "regions:{count}"),
            DisplacementModel::Zoom { scale } => write!(f, "zoom:{scale}"),
        }
    }
}

/// Parses `translation:U,V`, `regions:N` or `zoom:S`.
impl FromStr for DisplacementModel {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DataError::BadParams(format!("unrecognised displacement model `{s}`"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        match kind.trim() {
            "translation" => {
                let (u, v) = arg.split_once(',').ok_or_else(bad)?;
                Ok(DisplacementModel::Translation { u: num(u)?, v: num(v)? })
            }
            "regions" => Ok(DisplacementModel::Regions {
                count: arg.trim().parse().map_err(|_| bad())?,
            }),
            "zoom" => Ok(DisplacementModel::Zoom { scale: num(arg)? }),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticParams {
    pub width: usize,
    pub height: usize,
    pub octaves: usize,
    /// Lattice spacing of the coarsest noise octave, in pixels.
    pub base_cell: f64,
    pub model: DisplacementModel,
    /// Largest region displacement.
    pub v_max: f64,
    /// Amplitude of frame-2 noise on a region moving at `v_max`; scales
    /// linearly with the region's speed.
    pub appearance: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            width: 160,
            height: 128,
            octaves: 4,
            base_cell: 32.0,
            model: DisplacementModel::Regions { count: 16 },
            v_max: 90.0,
            appearance: 0.0,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::BadParams(m));
        if self.width < MIN_SIZE || self.height < MIN_SIZE {
            return bad(format!("size {}x{} below {MIN_SIZE}", self.width, self.height));
        }
        if self.octaves == 0 || !(self.base_cell >= 2.0) {
            return bad("need at least one octave and base cell >= 2".into());
        }
        if !(self.v_max >= 0.0) || !(self.appearance >= 0.0) {
            return bad("v_max and appearance must be non-negative".into());
        }
        match self.model {
            DisplacementModel::Translation { u, v } if !(u.is_finite() && v.is_finite()) => {
                bad("translation must be finite".into())
            }
            DisplacementModel::Regions { count: 0 } => bad("need at least one region".into()),
            DisplacementModel::Zoom { scale } if !(scale > 0.0 && scale.is_finite()) => {
                bad("zoom scale must be positive".into())
            }
            _ => Ok(()),
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise, min-max scaled to [0,1].
pub fn value_noise<R: Rng>(rng: &mut R, width: usize, height: usize, octaves: usize, base_cell: f64) -> Vec<f64> {
    let mut out = vec![0.0; width * height];
    let mut amp = 1.0;
    let mut cell = base_cell;
    for _ in 0..octaves {
        let gw = (width as f64 / cell).ceil() as usize + 2;
        let gh = (height as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
        for y in 0..height {
            let fy = y as f64 / cell;
            let iy = fy.floor() as usize;
            let ty = smoothstep(fy - iy as f64);
            for x in 0..width {
                let fx = x as f64 / cell;
                let ix = fx.floor() as usize;
                let tx = smoothstep(fx - ix as f64);
                let l = |i: usize, j: usize| lattice[j * gw + i];
                let top = l(ix, iy) + tx * (l(ix + 1, iy) - l(ix, iy));
                let bot = l(ix, iy + 1) + tx * (l(ix + 1, iy + 1) - l(ix, iy + 1));
                out[y * width + x] += amp * (top + ty * (bot - top));
            }
        }
        amp *= 0.5;
        cell = (cell / 2.0).max(1.0);
    }
    let (lo, hi) = out
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    out.iter_mut().for_each(|v| *v = (*v - lo) / span);
    out
}

fn inside(x: f64, y: f64, w: usize, h: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64
}

/// Frame 1, frame 2 and the forward flow from frame 1 to frame 2.
pub fn gen_synthetic_pair<R: Rng>(
    rng: &mut R,
    params: &SyntheticParams,
) -> Result<(GrayImage, GrayImage, FlowField), DataError> {
    params.validate()?;
    let (w, h) = (params.width, params.height);
    let tex = value_noise(rng, w, h, params.octaves, params.base_cell);
    let frame1 = GrayImage::new(w, h, tex)?;
    match params.model {
        DisplacementModel::Translation { u, v } => {
            Ok(warp_global(&frame1, |x, y| (x - u, y - v), |x, y| (x + u, y + v)))
        }
        DisplacementModel::Zoom { scale } => {
            let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
            Ok(warp_global(
                &frame1,
                |x, y| (cx + (x - cx) / scale, cy + (y - cy) / scale),
                |x, y| (cx + (x - cx) * scale, cy + (y - cy) * scale),
            ))
        }
        DisplacementModel::Regions { count } => regions(rng, frame1, params, count),
    }
}

/// `backward` maps a frame-2 pixel to its frame-1 source; `forward` maps a
/// frame-1 pixel to its frame-2 position.
fn warp_global(
    frame1: &GrayImage,
    backward: impl Fn(f64, f64) -> (f64, f64),
    forward: impl Fn(f64, f64) -> (f64, f64),
) -> (GrayImage, GrayImage, FlowField) {
    let (w, h) = (frame1.width(), frame1.height());
    let mut data = Vec::with_capacity(w * h);
    let mut flow = FlowField::invalid(w, h).expect("non-empty");
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = backward(x as f64, y as f64);
            data.push(frame1.sample_bilinear(sx, sy).clamp(0.0, 1.0));
            let (tx, ty) = forward(x as f64, y as f64);
            if inside(tx, ty, w, h) {
                flow.set(x, y, Some((tx - x as f64, ty - y as f64)));
            }
        }
    }
    let frame2 = GrayImage::new(w, h, data).expect("luminance in range");
    (frame1.clone(), frame2, flow)
}

struct Region {
    seed: (f64, f64),
    t: (f64, f64),
    speed: f64,
}

fn regions<R: Rng>(
    rng: &mut R,
    frame1: GrayImage,
    params: &SyntheticParams,
    count: usize,
) -> Result<(GrayImage, GrayImage, FlowField), DataError> {
    let (w, h) = (params.width, params.height);
    let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    let mut regs: Vec<Region> = (0..count)
        .map(|_| Region {
            seed: (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)),
            t: (0.0, 0.0),
            speed: 0.0,
        })
        .collect();

    let mut edges: Vec<f64> = STRATA.iter().copied().filter(|&e| e < params.v_max).collect();
    edges.push(params.v_max.max(f64::MIN_POSITIVE));
    let strata = edges.len() - 1;
    let mut order: Vec<usize> = (0..count).collect();
    let centre_dist = |r: &Region| (r.seed.0 - cx).hypot(r.seed.1 - cy);
    order.sort_by(|&a, &b| centre_dist(&regs[a]).total_cmp(&centre_dist(&regs[b])));
    // Regions far from the centre move fastest, towards the centre, so that
    // large displacements stay inside the frame.
    for (rank, &i) in order.iter().enumerate() {
        let s = (rank * strata / count).min(strata - 1);
        let speed = if params.v_max > 0.0 {
            rng.random_range(edges[s]..edges[s + 1])
        } else {
            0.0
        };
        let r = &mut regs[i];
        let (dx, dy) = (cx - r.seed.0, cy - r.seed.1);
        let base = if dx.hypot(dy) > 1.0 {
            dy.atan2(dx)
        } else {
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)
        };
        let angle = base + rng.random_range(-0.5..0.5);
        r.t = (speed * angle.cos(), speed * angle.sin());
        r.speed = speed;
    }

    let label: Vec<usize> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            (0..count)
                .min_by(|&a, &b| {
                    let da = (regs[a].seed.0 - x).powi(2) + (regs[a].seed.1 - y).powi(2);
                    let db = (regs[b].seed.0 - x).powi(2) + (regs[b].seed.1 - y).powi(2);
                    da.total_cmp(&db)
                })
                .expect("count > 0")
        })
        .collect();

    let mut depth: Vec<usize> = (0..count).collect();
    depth.sort_by(|&a, &b| regs[b].speed.total_cmp(&regs[a].speed).then(a.cmp(&b)));

    let background = value_noise(rng, w, h, params.octaves, params.base_cell);
    let mut owner = vec![None; w * h];
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut value = background[y * w + x];
            for &r in &depth {
                let (sx, sy) = (x as f64 - regs[r].t.0, y as f64 - regs[r].t.1);
                if !inside(sx, sy, w, h) {
                    continue;
                }
                let (rx, ry) = (sx.round() as usize, sy.round() as usize);
                if label[ry * w + rx] == r {
                    value = frame1.sample_bilinear(sx, sy);
                    if params.appearance > 0.0 && params.v_max > 0.0 {
                        let amp = params.appearance * regs[r].speed / params.v_max;
                        value += amp * rng.random_range(-1.0..1.0);
                    }
                    owner[y * w + x] = Some(r);
                    break;
                }
            }
            data.push(value.clamp(0.0, 1.0));
        }
    }

    let mut flow = FlowField::invalid(w, h)?;
    for y in 0..h {
        for x in 0..w {
            let r = label[y * w + x];
            let (tx, ty) = (x as f64 + regs[r].t.0, y as f64 + regs[r].t.1);
            if inside(tx, ty, w, h) && owner[ty.round() as usize * w + tx.round() as usize] == Some(r) {
                flow.set(x, y, Some(regs[r].t));
            }
        }
    }
    Ok((frame1, GrayImage::new(w, h, data)?, flow))
}
