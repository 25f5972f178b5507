//! Difficulty-stratified digit classification under training schedules.
//!
//! Digits 0–4 form group L and get noise on their bottom half; digits 5–9
//! form group H, get noise on their top half and are rotated by up to 45°.
//! One draw `a ~ U[0,1]` controls both noise amplitude and rotation, so it
//! is the sample's difficulty. A small convolutional classifier is then
//! trained under each schedule and scored per group on held-out samples.
//!
//! Interleaving schedules never drop samples; they scale each H sample's
//! share of the gradient by `w(a) = f + (1 − f)·(1 − (1 − s)·a)` and build
//! every minibatch across the whole difficulty range. The shift `s` is 0 for
//! plain interleaving, `i/m` with curriculum, `max(0, 1 − l_{i−1}/l_init)`
//! with self-pacing, and the product of the two for SPCI.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::IdxImages;
use crate::net::{sgd_step, Activation, Architecture, ConvSpec, DescriptorNet, NetError, OptState};
use crate::sampler::SPCI_REFERENCE_EPOCH;

pub const SIDE: usize = 28;
const PIXELS: usize = SIDE * SIDE;
const CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum MnistError {
    #[error("unknown schedule `{0}`")]
    UnknownSchedule(String),
    #[error("expected {SIDE}x{SIDE} images, got {0}x{1}")]
    ImageSize(usize, usize),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {0} outside 0..=9")]
    BadLabel(u8),
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    L,
    H,
}

impl Group {
    pub fn of(label: u8) -> Group {
        if label < 5 {
            Group::L
        } else {
            Group::H
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HardenedSample {
    pub image: Vec<f64>,
    pub label: u8,
    pub group: Group,
    pub difficulty: f64,
}

fn rotate(image: &[f64], degrees: f64) -> Vec<f64> {
    let c = (SIDE - 1) as f64 / 2.0;
    let (s, co) = degrees.to_radians().sin_cos();
    let at = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= SIDE as i64 || y >= SIDE as i64 {
            0.0
        } else {
            image[y as usize * SIDE + x as usize]
        }
    };
    let mut out = Vec::with_capacity(PIXELS);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let sx = c + co * dx + s * dy;
            let sy = c - s * dx + co * dy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
            let bot = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
            out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
        }
    }
    out
}

/// Applies a difficulty drawn from `rng` to one 28×28 digit.
pub fn transform_mnist<R: Rng>(image: &[f64], label: u8, rng: &mut R, a_max: f64) -> Result<HardenedSample, MnistError> {
    let a: f64 = rng.random();
    transform_with_difficulty(image, label, a, rng, a_max)
}

/// [`transform_mnist`] with the difficulty given rather than drawn.
pub fn transform_with_difficulty<R: Rng>(
    image: &[f64],
    label: u8,
    a: f64,
    rng: &mut R,
    a_max: f64,
) -> Result<HardenedSample, MnistError> {
    if image.len() != PIXELS {
        return Err(MnistError::ImageSize(image.len(), 1));
    }
    if label > 9 {
        return Err(MnistError::BadLabel(label));
    }
    let group = Group::of(label);
    let mut img = match group {
        Group::H if a > 0.0 => rotate(image, 45.0 * a),
        _ => image.to_vec(),
    };
    let rows = match group {
        Group::L => SIDE / 2..SIDE,
        Group::H => 0..SIDE / 2,
    };
    let amp = a * a_max;
    for y in rows {
        for x in 0..SIDE {
            let n: f64 = rng.random_range(-1.0..=1.0);
            let v = &mut img[y * SIDE + x];
            *v = (*v + amp * n).clamp(0.0, 1.0);
        }
    }
    Ok(HardenedSample {
        image: img,
        label,
        group,
        difficulty: a,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Schedule {
    Random,
    Curriculum,
    SelfPaced,
    Interleave,
    InterleaveCur,
    InterleaveSp,
    Spci,
}

impl Schedule {
    pub const ALL: [Schedule; 7] = [
        Schedule::Random,
        Schedule::Curriculum,
        Schedule::SelfPaced,
        Schedule::Interleave,
        Schedule::InterleaveCur,
        Schedule::InterleaveSp,
        Schedule::Spci,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Schedule::Random => "random",
            Schedule::Curriculum => "curriculum",
            Schedule::SelfPaced => "self_paced",
            Schedule::Interleave => "interleave",
            Schedule::InterleaveCur => "interleave+cur",
            Schedule::InterleaveSp => "interleave+sp",
            Schedule::Spci => "spci",
        }
    }

    fn interleaved(self) -> bool {
        matches!(
            self,
            Schedule::Interleave | Schedule::InterleaveCur | Schedule::InterleaveSp | Schedule::Spci
        )
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Schedule {
    type Err = MnistError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Schedule::ALL
            .into_iter()
            .find(|sc| sc.tag() == s)
            .ok_or_else(|| MnistError::UnknownSchedule(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MnistConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub conv_channels: usize,
    pub a_max: f64,
    /// Smallest gradient share of any H sample under interleaving.
    pub weight_floor: f64,
    /// Share of the training split held out for the validation loss.
    pub val_fraction: f64,
    /// Share of all samples used as the test split.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for MnistConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            conv_channels: 8,
            a_max: 0.8,
            weight_floor: 0.1,
            val_fraction: 0.1,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl MnistConfig {
    pub fn validate(&self) -> Result<(), MnistError> {
        let bad = |m: &str| Err(MnistError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.conv_channels == 0 {
            return bad("epochs, batch size and channels must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning rate must be positive and momentum in [0,1)");
        }
        if !(0.0..=1.0).contains(&self.weight_floor) || !(self.a_max >= 0.0) {
            return bad("weight floor must lie in [0,1] and a_max be non-negative");
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(0.0..1.0).contains(&self.test_fraction) {
            return bad("split fractions must lie in [0,1)");
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_size: SIDE,
            convs: vec![ConvSpec {
                channels: self.conv_channels,
                kernel: 5,
                stride: 2,
            }],
            activation: Activation::Tanh,
            output_dim: CLASSES,
        }
    }
}

/// Shuffles, splits into train/test and hardens every sample with its own
/// seed-derived RNG stream.
pub fn prepare(
    images: &IdxImages,
    labels: &[u8],
    cfg: &MnistConfig,
) -> Result<(Vec<HardenedSample>, Vec<HardenedSample>), MnistError> {
    cfg.validate()?;
    if (images.rows, images.cols) != (SIDE, SIDE) {
        return Err(MnistError::ImageSize(images.cols, images.rows));
    }
    if images.count != labels.len() {
        return Err(MnistError::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    let mut order: Vec<usize> = (0..images.count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let samples = order
        .par_iter()
        .map(|&i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            transform_mnist(images.image(i), labels[i], &mut rng, cfg.a_max)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n_test = (samples.len() as f64 * cfg.test_fraction).round() as usize;
    let mut train = samples;
    let test = train.split_off(train.len() - n_test);
    Ok((train, test))
}

/// Softmax cross-entropy and its gradient w.r.t. the logits.
fn cross_entropy(logits: &[f64], label: u8) -> (f64, Vec<f64>) {
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let loss = -(grad[label as usize]).ln();
    grad[label as usize] -= 1.0;
    (loss, grad)
}

fn sample_loss(net: &DescriptorNet, s: &HardenedSample) -> Result<f64, MnistError> {
    Ok(cross_entropy(net.forward(&s.image)?.output(), s.label).0)
}

fn mean_loss(net: &DescriptorNet, samples: &[HardenedSample]) -> Result<f64, MnistError> {
    let losses = samples
        .par_iter()
        .map(|s| sample_loss(net, s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupAccuracy {
    /// Percent correct on group L.
    pub l: f64,
    /// Percent correct on group H.
    pub h: f64,
}

pub fn evaluate(net: &DescriptorNet, samples: &[HardenedSample]) -> Result<GroupAccuracy, MnistError> {
    let hits = samples
        .par_iter()
        .map(|s| Ok((s.group, argmax(net.forward(&s.image)?.output()) == s.label as usize)))
        .collect::<Result<Vec<_>, MnistError>>()?;
    let pct = |g: Group| {
        let (n, ok) = hits
            .iter()
            .filter(|h| h.0 == g)
            .fold((0usize, 0usize), |(n, ok), h| (n + 1, ok + h.1 as usize));
        if n == 0 {
            0.0
        } else {
            100.0 * ok as f64 / n as f64
        }
    };
    Ok(GroupAccuracy {
        l: pct(Group::L),
        h: pct(Group::H),
    })
}

/// Gradient share of one sample under an interleaving schedule with shift `s`.
pub fn interleave_weight(sample: &HardenedSample, shift: f64, floor: f64) -> f64 {
    match sample.group {
        Group::L => 1.0,
        Group::H => floor + (1.0 - floor) * (1.0 - (1.0 - shift) * sample.difficulty),
    }
}

/// Splits `idx` into minibatches. With `stratify`, samples are ordered by
/// difficulty and dealt round-robin so every batch spans the full range.
fn make_batches(
    idx: &mut Vec<usize>,
    samples: &[HardenedSample],
    batch_size: usize,
    stratify: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    idx.shuffle(rng);
    if !stratify {
        return idx.chunks(batch_size).map(|c| c.to_vec()).collect();
    }
    idx.sort_by(|&a, &b| samples[a].difficulty.total_cmp(&samples[b].difficulty).then(a.cmp(&b)));
    let n_batches = idx.len().div_ceil(batch_size);
    let mut batches = vec![Vec::with_capacity(batch_size); n_batches];
    for (k, &i) in idx.iter().enumerate() {
        batches[k % n_batches].push(i);
    }
    for b in &mut batches {
        b.shuffle(rng);
    }
    batches.shuffle(rng);
    batches
}

/// Per-epoch trace of a schedule run.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    pub trained: usize,
    pub val_loss: f64,
    pub shift: f64,
    /// Difficulty range of every minibatch.
    pub batch_ranges: Vec<(f64, f64)>,
    /// Training samples presented this epoch.
    pub seen: Vec<usize>,
}

pub fn run_schedule_experiment(
    train: &[HardenedSample],
    test: &[HardenedSample],
    schedule: Schedule,
    cfg: &MnistConfig,
) -> Result<GroupAccuracy, MnistError> {
    Ok(run_schedule_traced(train, test, schedule, cfg)?.0)
}

/// [`run_schedule_experiment`] also returning the per-epoch trace.
pub fn run_schedule_traced(
    train: &[HardenedSample],
    test: &[HardenedSample],
    schedule: Schedule,
    cfg: &MnistConfig,
) -> Result<(GroupAccuracy, Vec<EpochTrace>), MnistError> {
    cfg.validate()?;
    let n_val = (train.len() as f64 * cfg.val_fraction).round() as usize;
    let (fit, val) = train.split_at(train.len() - n_val);
    if fit.is_empty() {
        return Err(MnistError::Config("no training samples after the validation split".into()));
    }
    let mut net = DescriptorNet::new(cfg.architecture(), cfg.seed)?;
    let mut opt = OptState::new(net.param_count(), cfg.lr, cfg.momentum);
    opt.halve_every = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);

    let mut by_difficulty: Vec<usize> = (0..fit.len()).collect();
    by_difficulty.sort_by(|&a, &b| fit[a].difficulty.total_cmp(&fit[b].difficulty).then(a.cmp(&b)));

    let m = cfg.epochs as f64;
    let (mut l_prev, mut l_init) = (None::<f64>, None::<f64>);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let progress = epoch as f64 / m;
        let improvement = match (l_prev, l_init) {
            (Some(p), Some(i)) if epoch > SPCI_REFERENCE_EPOCH && i > 0.0 => (1.0 - p / i).max(0.0),
            _ => 0.0,
        };
        let shift = match schedule {
            Schedule::InterleaveCur => progress,
            Schedule::InterleaveSp => improvement,
            Schedule::Spci => progress * improvement,
            _ => 0.0,
        };

        let mut pool: Vec<usize> = match schedule {
            Schedule::Curriculum => {
                let k = ((fit.len() as f64 * progress).ceil() as usize).clamp(1, fit.len());
                by_difficulty[..k].to_vec()
            }
            Schedule::SelfPaced => {
                let losses = fit
                    .par_iter()
                    .map(|s| sample_loss(&net, s))
                    .collect::<Result<Vec<_>, _>>()?;
                let start = (CLASSES as f64).ln();
                let top = losses.iter().cloned().fold(0.0, f64::max);
                let tau = if epoch == cfg.epochs {
                    f64::INFINITY
                } else {
                    start + progress * (top - start).max(0.0)
                };
                (0..fit.len()).filter(|&i| losses[i] <= tau).collect()
            }
            _ => (0..fit.len()).collect(),
        };

        let batches = make_batches(&mut pool, fit, cfg.batch_size, schedule.interleaved(), &mut rng);
        let mut ranges = Vec::with_capacity(batches.len());
        for batch in &batches {
            let weights: Vec<f64> = batch
                .iter()
                .map(|&i| {
                    if schedule.interleaved() {
                        interleave_weight(&fit[i], shift, cfg.weight_floor)
                    } else {
                        1.0
                    }
                })
                .collect();
            let (lo, hi) = batch.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                (lo.min(fit[i].difficulty), hi.max(fit[i].difficulty))
            });
            ranges.push((lo, hi));
            let mut grads = vec![0.0; net.param_count()];
            for (&i, &w) in batch.iter().zip(&weights) {
                let s = &fit[i];
                let f = net.forward(&s.image)?;
                let (_, g) = cross_entropy(f.output(), s.label);
                let g: Vec<f64> = g.iter().map(|v| v * w / batch.len() as f64).collect();
                net.backward(&s.image, &f, &g, &mut grads)?;
            }
            sgd_step(&mut net, &grads, &mut opt)?;
        }
        opt.next_epoch();

        let val_loss = if val.is_empty() { 0.0 } else { mean_loss(&net, val)? };
        if epoch == SPCI_REFERENCE_EPOCH {
            l_init = Some(val_loss);
        }
        l_prev = Some(val_loss);
        let mut seen = pool.clone();
        seen.sort_unstable();
        trace.push(EpochTrace {
            epoch,
            trained: pool.len(),
            val_loss,
            shift,
            batch_ranges: ranges,
            seen,
        });
    }
    Ok((evaluate(&net, test)?, trace))
}

pub const CSV_HEADER: &str = "schedule,group,accuracy";

pub fn write_accuracy_csv<W: Write>(mut w: W, results: &[(Schedule, GroupAccuracy)]) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for (s, acc) in results {
        writeln!(w, "{s},L,{}", acc.l)?;
        writeln!(w, "{s},H,{}", acc.h)?;
    }
    Ok(())
}
