//! PatchMatch nearest-neighbour fields over descriptor fields and the
//! forward/backward consistency check that turns two of them into sparse
//! flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::types::{l2, DescriptorField, FlowField, ImageError};

#[derive(Debug, Error, PartialEq)]
pub enum NnfError {
    #[error("descriptor dimensions differ ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error("search range must be at least 1")]
    ZeroRange,
    #[error("iterations must be at least 1")]
    ZeroIterations,
    #[error("search decay must lie in (0,1), got {0}")]
    BadDecay(f64),
    #[error("forward field targets {0}x{1} but backward field covers {2}x{3}")]
    Incompatible(usize, usize, usize, usize),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PmParams {
    /// Initial guess range and first random-search window, in pixels.
    pub range: usize,
    pub iterations: usize,
    /// Ratio between successive random-search windows.
    pub decay: f64,
    pub seed: u64,
}

impl Default for PmParams {
    fn default() -> Self {
        Self {
            range: 100,
            iterations: 6,
            decay: 0.5,
            seed: 0,
        }
    }
}

impl PmParams {
    pub fn validate(&self) -> Result<(), NnfError> {
        if self.range == 0 {
            return Err(NnfError::ZeroRange);
        }
        if self.iterations == 0 {
            return Err(NnfError::ZeroIterations);
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(NnfError::BadDecay(self.decay));
        }
        Ok(())
    }
}

/// Per-pixel offsets from a source field into a target field.
#[derive(Clone, Debug, PartialEq)]
pub struct NnField {
    width: usize,
    height: usize,
    target_width: usize,
    target_height: usize,
    offsets: Vec<(i64, i64)>,
    costs: Vec<f64>,
}

impl NnField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn target_dims(&self) -> (usize, usize) {
        (self.target_width, self.target_height)
    }

    pub fn offset(&self, x: usize, y: usize) -> (i64, i64) {
        self.offsets[y * self.width + x]
    }

    pub fn cost(&self, x: usize, y: usize) -> f64 {
        self.costs[y * self.width + x]
    }

    pub fn offsets(&self) -> &[(i64, i64)] {
        &self.offsets
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    /// Builds a field from explicit offsets, computing costs from the
    /// descriptors. Offsets must land inside `b`.
    pub fn from_offsets(a: &DescriptorField, b: &DescriptorField, offsets: Vec<(i64, i64)>) -> Result<Self, NnfError> {
        check_dims(a, b)?;
        if offsets.len() != a.width() * a.height() {
            return Err(ImageError::BufferSize {
                width: a.width(),
                height: a.height(),
                channels: 1,
                got: offsets.len(),
            }
            .into());
        }
        let mut costs = Vec::with_capacity(offsets.len());
        for (i, &(dx, dy)) in offsets.iter().enumerate() {
            let (x, y) = ((i % a.width()) as i64, (i / a.width()) as i64);
            let (tx, ty) = (x + dx, y + dy);
            if tx < 0 || ty < 0 || tx >= b.width() as i64 || ty >= b.height() as i64 {
                return Err(ImageError::OutOfBounds {
                    x: tx,
                    y: ty,
                    width: b.width(),
                    height: b.height(),
                }
                .into());
            }
            costs.push(a.distance_to((x as usize, y as usize), b, (tx as usize, ty as usize)));
        }
        Ok(Self {
            width: a.width(),
            height: a.height(),
            target_width: b.width(),
            target_height: b.height(),
            offsets,
            costs,
        })
    }

    /// The field as a dense, fully valid flow.
    pub fn to_flow(&self) -> FlowField {
        let n = self.offsets.len();
        let u = self.offsets.iter().map(|o| o.0 as f64).collect();
        let v = self.offsets.iter().map(|o| o.1 as f64).collect();
        FlowField::new(self.width, self.height, u, v, vec![true; n]).expect("consistent sizes")
    }
}

fn check_dims(a: &DescriptorField, b: &DescriptorField) -> Result<(), NnfError> {
    if a.dim() != b.dim() {
        return Err(NnfError::DimMismatch(a.dim(), b.dim()));
    }
    Ok(())
}

/// Independent RNG stream for one pixel at one stage of the search.
fn pixel_rng(seed: u64, stage: u64, pixel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(pixel);
    rng
}

/// Uniform offset along one axis with `|d| ≤ range` and `0 ≤ pos + d < len`.
/// When no such offset exists the nearest in-bounds position is used.
fn random_axis_offset<R: Rng>(rng: &mut R, pos: i64, len: usize, range: i64) -> i64 {
    let lo = (-range).max(-pos);
    let hi = range.min(len as i64 - 1 - pos);
    if lo > hi {
        return pos.clamp(0, len as i64 - 1) - pos;
    }
    rng.random_range(lo..=hi)
}

/// Uniform random in-range offsets.
pub fn init_nnf(a: &DescriptorField, b: &DescriptorField, params: &PmParams) -> Result<NnField, NnfError> {
    params.validate()?;
    check_dims(a, b)?;
    let r = params.range as i64;
    let mut offsets = Vec::with_capacity(a.width() * a.height());
    for y in 0..a.height() {
        for x in 0..a.width() {
            let mut rng = pixel_rng(params.seed, 0, (y * a.width() + x) as u64);
            let dx = random_axis_offset(&mut rng, x as i64, b.width(), r);
            let dy = random_axis_offset(&mut rng, y as i64, b.height(), r);
            offsets.push((dx, dy));
        }
    }
    NnField::from_offsets(a, b, offsets)
}

pub fn patchmatch(a: &DescriptorField, b: &DescriptorField, params: &PmParams) -> Result<NnField, NnfError> {
    patchmatch_observed(a, b, params, |_, _| {})
}

/// [`patchmatch`] calling `observe(k, field)` after initialisation (`k = 0`)
/// and after each iteration `k = 1..=iterations`.
pub fn patchmatch_observed(
    a: &DescriptorField,
    b: &DescriptorField,
    params: &PmParams,
    mut observe: impl FnMut(usize, &NnField),
) -> Result<NnField, NnfError> {
    let mut field = init_nnf(a, b, params)?;
    observe(0, &field);
    let (w, h) = (a.width(), a.height());
    let (bw, bh) = (b.width() as i64, b.height() as i64);
    for k in 0..params.iterations {
        let forward = k % 2 == 0;
        for step in 0..w * h {
            let idx = if forward { step } else { w * h - 1 - step };
            let (x, y) = (idx % w, idx / w);
            let desc = a.descriptor(x, y);
            let (xi, yi) = (x as i64, y as i64);
            let mut best = field.offsets[idx];
            let mut best_cost = field.costs[idx];
            let consider = |off: (i64, i64), best: &mut (i64, i64), best_cost: &mut f64| {
                let (tx, ty) = (xi + off.0, yi + off.1);
                if tx < 0 || ty < 0 || tx >= bw || ty >= bh {
                    return;
                }
                let c = l2(desc, b.descriptor(tx as usize, ty as usize));
                if c < *best_cost {
                    *best = off;
                    *best_cost = c;
                }
            };

            let neighbours: [Option<usize>; 2] = if forward {
                [(x > 0).then(|| idx - 1), (y > 0).then(|| idx - w)]
            } else {
                [(x + 1 < w).then(|| idx + 1), (y + 1 < h).then(|| idx + w)]
            };
            for n in neighbours.into_iter().flatten() {
                consider(field.offsets[n], &mut best, &mut best_cost);
            }

            let mut rng = pixel_rng(params.seed, k as u64 + 1, idx as u64);
            let mut radius = params.range as f64;
            while radius >= 1.0 {
                let r = radius as i64;
                let (cx, cy) = (xi + best.0, yi + best.1);
                let tx = (cx + rng.random_range(-r..=r)).clamp(0, bw - 1);
                let ty = (cy + rng.random_range(-r..=r)).clamp(0, bh - 1);
                consider((tx - xi, ty - yi), &mut best, &mut best_cost);
                radius *= params.decay;
            }

            field.offsets[idx] = best;
            field.costs[idx] = best_cost;
        }
        observe(k + 1, &field);
    }
    Ok(field)
}

/// Keeps forward offsets whose backward counterpart returns within `tau`
/// pixels of the start.
pub fn consistency_filter(fwd: &NnField, bwd: &NnField, tau: f64) -> Result<FlowField, NnfError> {
    if fwd.target_dims() != (bwd.width, bwd.height) || bwd.target_dims() != (fwd.width, fwd.height) {
        return Err(NnfError::Incompatible(
            fwd.target_width,
            fwd.target_height,
            bwd.width,
            bwd.height,
        ));
    }
    let mut out = FlowField::invalid(fwd.width, fwd.height)?;
    for y in 0..fwd.height {
        for x in 0..fwd.width {
            let (dx, dy) = fwd.offset(x, y);
            let (bx, by) = bwd.offset((x as i64 + dx) as usize, (y as i64 + dy) as usize);
            let rx = (dx + bx) as f64;
            let ry = (dy + by) as f64;
            if (rx * rx + ry * ry).sqrt() <= tau {
                out.set(x, y, Some((dx as f64, dy as f64)));
            }
        }
    }
    Ok(out)
}

/// Forward and backward PatchMatch (run concurrently) followed by the
/// consistency check.
pub fn sparse_flow(a: &DescriptorField, b: &DescriptorField, params: &PmParams, tau: f64) -> Result<FlowField, NnfError> {
    let (fwd, bwd) = rayon::join(|| patchmatch(a, b, params), || patchmatch(b, a, params));
    consistency_filter(&fwd?, &bwd?, tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_field(w: usize, h: usize, dim: usize, seed: u64) -> DescriptorField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        DescriptorField::new(w, h, dim, data).unwrap()
    }

    fn coordinate_field(w: usize, h: usize) -> DescriptorField {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                data.extend([x as f64, y as f64]);
            }
        }
        DescriptorField::new(w, h, 2, data).unwrap()
    }

    fn params(range: usize, seed: u64) -> PmParams {
        PmParams {
            range,
            seed,
            ..PmParams::default()
        }
    }

    #[test]
    fn init_respects_range_and_bounds() {
        let a = random_field(10, 8, 3, 1);
        let f = init_nnf(&a, &a, &params(1, 4)).unwrap();
        for y in 0..8 {
            for x in 0..10 {
                let (dx, dy) = f.offset(x, y);
                assert!(dx.abs() <= 1 && dy.abs() <= 1);
                let (tx, ty) = (x as i64 + dx, y as i64 + dy);
                assert!((0..10).contains(&tx) && (0..8).contains(&ty));
            }
        }
        assert_eq!(init_nnf(&a, &a, &params(0, 4)), Err(NnfError::ZeroRange));
    }

    #[test]
    fn init_costs_match_direct_distance() {
        let a = random_field(20, 15, 5, 2);
        let b = random_field(20, 15, 5, 3);
        let f = init_nnf(&a, &b, &params(6, 9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (x, y) = (rng.random_range(0..20), rng.random_range(0..15));
            let (dx, dy) = f.offset(x, y);
            let (tx, ty) = ((x as i64 + dx) as usize, (y as i64 + dy) as usize);
            let direct: f64 = a
                .descriptor(x, y)
                .iter()
                .zip(b.descriptor(tx, ty))
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            assert_eq!(f.cost(x, y), direct);
        }
        assert_eq!(init_nnf(&a, &b, &params(6, 9)).unwrap(), f);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let a = random_field(4, 4, 3, 0);
        let b = random_field(4, 4, 2, 0);
        assert_eq!(init_nnf(&a, &b, &params(2, 0)), Err(NnfError::DimMismatch(3, 2)));
    }

    #[test]
    fn identity_field_converges() {
        let a = coordinate_field(16, 12);
        let f = patchmatch(&a, &a, &params(8, 3)).unwrap();
        assert!(f.offsets().iter().all(|&o| o == (0, 0)));
        assert!(f.costs().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn costs_never_increase() {
        let a = random_field(24, 24, 8, 11);
        let b = random_field(24, 24, 8, 12);
        let mut prev: Option<Vec<f64>> = None;
        let out = patchmatch_observed(&a, &b, &params(24, 5), |_, f| {
            if let Some(p) = &prev {
                for (old, new) in p.iter().zip(f.costs()) {
                    assert!(new <= old);
                }
            }
            prev = Some(f.costs().to_vec());
        })
        .unwrap();
        let recomputed = NnField::from_offsets(&a, &b, out.offsets().to_vec()).unwrap();
        assert_eq!(recomputed.costs(), out.costs());
    }

    #[test]
    fn recovers_constructed_shift() {
        let full = random_field(48, 20, 6, 21);
        let crop = |x0: usize| {
            let mut data = Vec::new();
            for y in 0..20 {
                for x in x0..x0 + 40 {
                    data.extend_from_slice(full.descriptor(x, y));
                }
            }
            DescriptorField::new(40, 20, 6, data).unwrap()
        };
        // b(x) = a(x - 5): content moves 5 px to the right.
        let a = crop(5);
        let b = crop(0);
        let f = patchmatch(&b, &a, &params(10, 2)).unwrap();
        for y in 0..20 {
            for x in 5..40 {
                assert_eq!(f.offset(x, y), (-5, 0));
            }
        }
        let f = patchmatch(&a, &b, &params(10, 2)).unwrap();
        for y in 0..20 {
            for x in 0..35 {
                assert_eq!(f.offset(x, y), (5, 0));
            }
        }
    }

    #[test]
    fn consistency_examples() {
        let a = random_field(6, 5, 2, 1);
        let fwd = NnField::from_offsets(&a, &a, (0..30).map(|i| if i % 6 < 5 { (1, 0) } else { (0, 0) }).collect()).unwrap();
        let bwd = NnField::from_offsets(&a, &a, (0..30).map(|i| if i % 6 > 0 { (-1, 0) } else { (0, 0) }).collect()).unwrap();
        let flow = consistency_filter(&fwd, &bwd, 1.0).unwrap();
        assert_eq!(flow.valid_count(), 30);

        let same = NnField::from_offsets(&a, &a, (0..30).map(|i| if i % 6 < 5 { (1, 0) } else { (0, 0) }).collect()).unwrap();
        let flow = consistency_filter(&fwd, &same, 1.0).unwrap();
        // Only column 4 → 5 → stays: fwd (1,0), bwd at 5 is (0,0), residual 1.
        for y in 0..5 {
            for x in 0..6 {
                assert_eq!(flow.is_valid(x, y), x >= 4, "({x},{y})");
            }
        }
    }

    #[test]
    fn consistency_matches_direct_evaluation() {
        let a = random_field(12, 10, 3, 7);
        let b = random_field(12, 10, 3, 8);
        let fwd = init_nnf(&a, &b, &params(3, 1)).unwrap();
        let bwd = init_nnf(&b, &a, &params(3, 2)).unwrap();
        let flow = consistency_filter(&fwd, &bwd, 1.0).unwrap();
        for y in 0..10 {
            for x in 0..12 {
                let (dx, dy) = fwd.offset(x, y);
                let (bx, by) = bwd.offset((x as i64 + dx) as usize, (y as i64 + dy) as usize);
                let ok = (((dx + bx).pow(2) + (dy + by).pow(2)) as f64).sqrt() <= 1.0;
                assert_eq!(flow.is_valid(x, y), ok);
                if ok {
                    assert_eq!(flow.get(x, y), (dx as f64, dy as f64));
                }
            }
        }
    }

    #[test]
    fn incompatible_fields_rejected() {
        let a = random_field(4, 4, 2, 0);
        let b = random_field(5, 4, 2, 0);
        let fwd = init_nnf(&a, &b, &params(2, 0)).unwrap();
        let bwd = init_nnf(&a, &a, &params(2, 0)).unwrap();
        assert!(matches!(consistency_filter(&fwd, &bwd, 1.0), Err(NnfError::Incompatible(..))));
    }
}
