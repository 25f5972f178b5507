//! Flow accuracy and descriptor quality metrics, grouped by ground-truth
//! displacement where relevant.

use std::io::{self, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::types::{DescriptorField, FlowField, Pixel};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("evaluation mask selects no pixels")]
    EmptyMask,
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("estimate is missing at masked pixel ({0},{1})")]
    MissingEstimate(usize, usize),
    #[error("radius must be at least 1, got {0}")]
    BadRadius(f64),
    #[error("bucket edges must be strictly increasing with at least two entries")]
    BadEdges,
    #[error("reference bucket [{0},{1}) has no pixels")]
    EmptyReferenceBucket(f64, f64),
    #[error("reference bucket [{0},{1}) has zero mean distance")]
    ZeroReference(f64, f64),
    #[error("image is too narrow for a {0} px offset")]
    TooNarrow(usize),
}

/// Left-closed displacement ranges `[edges[i], edges[i+1])`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementBuckets {
    edges: Vec<f64>,
}

impl Default for DisplacementBuckets {
    fn default() -> Self {
        Self {
            edges: vec![0.0, 5.0, 10.0, 20.0, 30.0, 45.0, 60.0, 90.0, f64::INFINITY],
        }
    }
}

impl DisplacementBuckets {
    pub fn new(edges: Vec<f64>) -> Result<Self, EvalError> {
        if edges.len() < 2 || edges.iter().any(|e| e.is_nan()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::BadEdges);
        }
        Ok(Self { edges })
    }

    /// Buckets used by the neighbour-sensitivity profile.
    pub fn sensitivity() -> Self {
        Self {
            edges: vec![0.0, 5.0, 10.0, 40.0, f64::INFINITY],
        }
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bounds(&self, i: usize) -> (f64, f64) {
        (self.edges[i], self.edges[i + 1])
    }

    pub fn index(&self, v: f64) -> Option<usize> {
        if v < self.edges[0] {
            return None;
        }
        let i = self.edges.partition_point(|&e| e <= v);
        (i < self.edges.len()).then(|| i - 1)
    }
}

/// Mean of one metric over one displacement bucket; `mean` is `None` when
/// the bucket holds no pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BucketStat {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    pub mean: Option<f64>,
}

fn check_same(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<(), EvalError> {
    if a != b {
        return Err(EvalError::SizeMismatch(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

fn endpoint_errors(flow: &FlowField, gt: &FlowField, mask: &[bool]) -> Result<Vec<f64>, EvalError> {
    check_same("flow vs ground truth", (flow.width(), flow.height()), (gt.width(), gt.height()))?;
    if mask.len() != gt.width() * gt.height() {
        return Err(EvalError::SizeMismatch(format!(
            "mask has {} entries for {} pixels",
            mask.len(),
            gt.width() * gt.height()
        )));
    }
    let mut errs = Vec::new();
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % gt.width(), i / gt.width());
        if !flow.is_valid(x, y) {
            return Err(EvalError::MissingEstimate(x, y));
        }
        let (u, v) = flow.get(x, y);
        let (gu, gv) = gt.get(x, y);
        errs.push((u - gu).hypot(v - gv));
    }
    if errs.is_empty() {
        return Err(EvalError::EmptyMask);
    }
    Ok(errs)
}

/// Percentage of masked pixels whose end-point error exceeds `threshold`.
pub fn outlier_rate(flow: &FlowField, gt: &FlowField, threshold: f64, mask: &[bool]) -> Result<f64, EvalError> {
    let errs = endpoint_errors(flow, gt, mask)?;
    let bad = errs.iter().filter(|&&e| e > threshold).count();
    Ok(100.0 * bad as f64 / errs.len() as f64)
}

/// Mean end-point error over masked pixels.
pub fn epe(flow: &FlowField, gt: &FlowField, mask: &[bool]) -> Result<f64, EvalError> {
    let errs = endpoint_errors(flow, gt, mask)?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Ground-truth match of `p`, rounded, if it lies inside `width × height`.
fn true_match(gt: &FlowField, x: usize, y: usize, width: usize, height: usize) -> Option<(Pixel, f64)> {
    if !gt.is_valid(x, y) {
        return None;
    }
    let (u, v) = gt.get(x, y);
    let t = Pixel::new((x as f64 + u).round() as i64, (y as f64 + v).round() as i64);
    let inside = t.x >= 0 && t.y >= 0 && (t.x as usize) < width && (t.y as usize) < height;
    inside.then(|| (t, u.hypot(v)))
}

/// Row-parallel per-bucket accumulation with a fixed reduction order.
fn bucket_means(
    height: usize,
    buckets: &DisplacementBuckets,
    per_row: impl Fn(usize, &mut dyn FnMut(f64, f64)) + Sync,
) -> Vec<BucketStat> {
    let rows: Vec<Vec<(f64, usize)>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut acc = vec![(0.0, 0usize); buckets.len()];
            per_row(y, &mut |v, value| {
                if let Some(b) = buckets.index(v) {
                    acc[b].0 += value;
                    acc[b].1 += 1;
                }
            });
            acc
        })
        .collect();
    (0..buckets.len())
        .map(|b| {
            let (sum, count) = rows.iter().fold((0.0, 0), |(s, c), r| (s + r[b].0, c + r[b].1));
            let (low, high) = buckets.bounds(b);
            BucketStat {
                low,
                high,
                count,
                mean: (count > 0).then(|| sum / count as f64),
            }
        })
        .collect()
}

/// Mean number of frame-2 pixels within `radius` of the true match whose
/// descriptor is strictly closer to the anchor than the true match's.
pub fn count_distractors(
    a: &DescriptorField,
    b: &DescriptorField,
    gt: &FlowField,
    radius: f64,
    buckets: &DisplacementBuckets,
) -> Result<Vec<BucketStat>, EvalError> {
    if !(radius >= 1.0) {
        return Err(EvalError::BadRadius(radius));
    }
    check_same("descriptors vs ground truth", (a.width(), a.height()), (gt.width(), gt.height()))?;
    if a.dim() != b.dim() {
        return Err(EvalError::SizeMismatch(format!("descriptor dims {} vs {}", a.dim(), b.dim())));
    }
    let r = radius.floor() as i64;
    let r2 = radius * radius;
    Ok(bucket_means(gt.height(), buckets, |y, emit| {
        for x in 0..gt.width() {
            let Some((t, v)) = true_match(gt, x, y, b.width(), b.height()) else {
                continue;
            };
            let anchor = a.descriptor(x, y);
            let d_true = crate::types::l2(anchor, b.descriptor(t.x as usize, t.y as usize));
            let mut count = 0usize;
            for qy in (t.y - r).max(0)..=(t.y + r).min(b.height() as i64 - 1) {
                for qx in (t.x - r).max(0)..=(t.x + r).min(b.width() as i64 - 1) {
                    let (dx, dy) = ((qx - t.x) as f64, (qy - t.y) as f64);
                    if dx * dx + dy * dy > r2 || (qx, qy) == (t.x, t.y) {
                        continue;
                    }
                    if crate::types::l2(anchor, b.descriptor(qx as usize, qy as usize)) < d_true {
                        count += 1;
                    }
                }
            }
            emit(v, count as f64);
        }
    }))
}

/// Mean descriptor distance between each pixel and its true match.
pub fn match_distance_profile(
    a: &DescriptorField,
    b: &DescriptorField,
    gt: &FlowField,
    buckets: &DisplacementBuckets,
) -> Result<Vec<BucketStat>, EvalError> {
    check_same("descriptors vs ground truth", (a.width(), a.height()), (gt.width(), gt.height()))?;
    if a.dim() != b.dim() {
        return Err(EvalError::SizeMismatch(format!("descriptor dims {} vs {}", a.dim(), b.dim())));
    }
    Ok(bucket_means(gt.height(), buckets, |y, emit| {
        for x in 0..gt.width() {
            if let Some((t, v)) = true_match(gt, x, y, b.width(), b.height()) {
                emit(v, a.distance_to((x, y), b, (t.x as usize, t.y as usize)));
            }
        }
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityProfile {
    /// Mean distance to the horizontally offset neighbour, per bucket.
    pub stats: Vec<BucketStat>,
    /// Each bucket's mean over the first bucket's mean.
    pub ratios: Vec<Option<f64>>,
}

/// Mean distance between each descriptor and the one `offset` pixels to its
/// right, per displacement bucket.
pub fn sensitivity_stats(
    a: &DescriptorField,
    gt: &FlowField,
    offset: usize,
    buckets: &DisplacementBuckets,
) -> Result<Vec<BucketStat>, EvalError> {
    check_same("descriptors vs ground truth", (a.width(), a.height()), (gt.width(), gt.height()))?;
    if offset >= a.width() {
        return Err(EvalError::TooNarrow(offset));
    }
    Ok(bucket_means(gt.height(), buckets, |y, emit| {
        for x in 0..gt.width() - offset {
            if gt.is_valid(x, y) {
                let (u, v) = gt.get(x, y);
                emit(u.hypot(v), a.distance_to((x, y), a, (x + offset, y)));
            }
        }
    }))
}

/// Divides every bucket mean by the first bucket's mean.
pub fn sensitivity_ratios(stats: Vec<BucketStat>) -> Result<SensitivityProfile, EvalError> {
    let reference = stats[0];
    let base = reference
        .mean
        .ok_or(EvalError::EmptyReferenceBucket(reference.low, reference.high))?;
    if base == 0.0 {
        return Err(EvalError::ZeroReference(reference.low, reference.high));
    }
    let ratios = stats.iter().map(|s| s.mean.map(|m| m / base)).collect();
    Ok(SensitivityProfile { stats, ratios })
}

/// How much descriptors change `offset` pixels to the right, per
/// displacement bucket, relative to the smallest-displacement bucket.
pub fn sensitivity_profile(
    a: &DescriptorField,
    gt: &FlowField,
    offset: usize,
    buckets: &DisplacementBuckets,
) -> Result<SensitivityProfile, EvalError> {
    sensitivity_ratios(sensitivity_stats(a, gt, offset, buckets)?)
}

/// Count-weighted combination of per-image bucket statistics that share
/// the same buckets.
pub fn pool_stats(sets: &[Vec<BucketStat>]) -> Vec<BucketStat> {
    let Some(first) = sets.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|b| {
            let (sum, count) = sets.iter().fold((0.0, 0usize), |(s, c), set| {
                let st = set[b];
                (s + st.mean.unwrap_or(0.0) * st.count as f64, c + st.count)
            });
            BucketStat {
                low: first[b].low,
                high: first[b].high,
                count,
                mean: (count > 0).then(|| sum / count as f64),
            }
        })
        .collect()
}

pub const CSV_HEADER: &str = "bucket_low,bucket_high,metric,value";

#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub low: f64,
    pub high: f64,
    pub metric: String,
    pub value: f64,
}

impl CsvRow {
    /// Rows for every non-empty bucket.
    pub fn from_stats(metric: &str, stats: &[BucketStat]) -> Vec<CsvRow> {
        stats
            .iter()
            .filter_map(|s| {
                s.mean.map(|value| CsvRow {
                    low: s.low,
                    high: s.high,
                    metric: metric.to_string(),
                    value,
                })
            })
            .collect()
    }

    /// A whole-image metric, spanning `[0, inf)`.
    pub fn overall(metric: &str, value: f64) -> CsvRow {
        CsvRow {
            low: 0.0,
            high: f64::INFINITY,
            metric: metric.to_string(),
            value,
        }
    }
}

pub fn write_csv<W: Write>(mut w: W, rows: &[CsvRow]) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.low, r.high, r.metric, r.value)?;
    }
    Ok(())
}
