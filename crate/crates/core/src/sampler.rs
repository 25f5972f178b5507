//! Triplet construction under the negative-sampling schedules.
//!
//! Every strategy picks anchors uniformly from pixels with valid ground
//! truth and differs only in where the negative lands:
//!
//! | strategy     | negative centre                                              |
//! |--------------|--------------------------------------------------------------|
//! | `baseline`   | the true match                                               |
//! | `interleave` | on the motion line, `d = v·(1 − x̂)` from the true match     |
//! | `spci`       | as interleave with `d = clamp(v·(1 − x̂ − R_i), 0, v)`        |
//! | `anti`       | as interleave with `d = (v_max − v)·(1 − x̂)`                |
//! | `cur_disp`   | baseline, anchors restricted to `v ≤ v_cap(i)`               |
//! | `cur_dist`   | a random direction at distance shrinking 64 → 8 px           |
//! | `self_paced` | baseline, keeping only triplets under a rising loss threshold |
//! | `neg_mine`   | the harder of two baseline candidates                        |
//!
//! `x̂` are log-normal draws min-max normalised over the whole batch. The
//! negative itself is drawn uniformly from the integer pixels within
//! Chebyshev distance [`NEGATIVE_RADIUS`] of the centre, excluding the true
//! match.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use thiserror::Error;

use crate::loss::{triplet_loss, LossConfig};
use crate::net::{distance_with_grad, DescriptorNet, NetError, TripletPatches};
use crate::types::{extract_patch, normalize_patch, FlowField, GrayImage, ImageError, Pixel};

pub const NEGATIVE_RADIUS: i64 = 8;
/// Epoch whose validation loss becomes the SPCI reference loss.
pub const SPCI_REFERENCE_EPOCH: usize = 5;
const MAX_PLACEMENT_TRIES: usize = 100;
const MAX_SELF_PACED_ROUNDS: usize = 200;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("need at least 2 samples for batch normalisation, got {0}")]
    BatchTooSmall(usize),
    #[error("log-normal sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("total epochs must be positive")]
    ZeroEpochs,
    #[error("epoch {epoch} exceeds total epochs {total}")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("reference loss is zero; the self-paced ratio is undefined")]
    ZeroReferenceLoss,
    #[error("no eligible anchors under filter `{0}`")]
    NoEligibleAnchors(String),
    #[error("strategy `{0}` needs a network to score candidates")]
    NetRequired(Strategy),
    #[error("could not place a negative near ({x:.1},{y:.1}) after {MAX_PLACEMENT_TRIES} tries")]
    PlacementFailed { x: f64, y: f64 },
    #[error("self-paced filter kept only {kept} of {wanted} triplets")]
    SelfPacedStarved { kept: usize, wanted: usize },
    #[error("frame and ground-truth sizes differ")]
    SizeMismatch,
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Baseline,
    Interleave,
    Spci,
    Anti,
    CurDisp,
    CurDist,
    SelfPaced,
    NegMine,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Baseline,
        Strategy::Interleave,
        Strategy::Spci,
        Strategy::Anti,
        Strategy::CurDisp,
        Strategy::CurDist,
        Strategy::SelfPaced,
        Strategy::NegMine,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Interleave => "interleave",
            Strategy::Spci => "spci",
            Strategy::Anti => "anti",
            Strategy::CurDisp => "cur_disp",
            Strategy::CurDist => "cur_dist",
            Strategy::SelfPaced => "self_paced",
            Strategy::NegMine => "neg_mine",
        }
    }

    pub fn needs_net(self) -> bool {
        matches!(self, Strategy::SelfPaced | Strategy::NegMine)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Strategy {
    type Err = SamplerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.tag() == s)
            .ok_or_else(|| SamplerError::UnknownStrategy(s.to_string()))
    }
}

/// Where training currently stands; drives every epoch-dependent rule.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleState {
    pub strategy: Strategy,
    /// Current epoch, `0..=total_epochs`.
    pub epoch: usize,
    pub total_epochs: usize,
    /// Validation loss of the previous epoch.
    pub l_prev: Option<f64>,
    /// Validation loss at [`SPCI_REFERENCE_EPOCH`], once known.
    pub l_init: Option<f64>,
    pub seed: u64,
}

impl ScheduleState {
    pub fn new(strategy: Strategy, epoch: usize, total_epochs: usize, seed: u64) -> Self {
        Self {
            strategy,
            epoch,
            total_epochs,
            l_prev: None,
            l_init: None,
            seed,
        }
    }

    fn progress(&self) -> f64 {
        if self.total_epochs == 0 {
            return 1.0;
        }
        (self.epoch as f64 / self.total_epochs as f64).min(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogNormalParams {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for LogNormalParams {
    fn default() -> Self {
        Self { mu: 0.0, sigma: 1.0 }
    }
}

/// Raw log-normal variates `exp(μ + σ·Z)`.
pub fn sample_lognormal<R: Rng>(rng: &mut R, n: usize, params: LogNormalParams) -> Result<Vec<f64>, SamplerError> {
    let dist = LogNormal::new(params.mu, params.sigma).map_err(|_| SamplerError::BadSigma(params.sigma))?;
    if !(params.sigma > 0.0) {
        return Err(SamplerError::BadSigma(params.sigma));
    }
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Log-normal draws min-max normalised over the batch to [0,1].
pub fn sample_lognormal_normalized<R: Rng>(
    rng: &mut R,
    n: usize,
    params: LogNormalParams,
) -> Result<Vec<f64>, SamplerError> {
    if n < 2 {
        return Err(SamplerError::BatchTooSmall(n));
    }
    let raw = sample_lognormal(rng, n, params)?;
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = hi - lo;
    if span <= 0.0 {
        return Ok(vec![0.0; n]);
    }
    Ok(raw.into_iter().map(|x| (x - lo) / span).collect())
}

/// `R_i = (i/m)·max(0, 1 − l_{i−1}/l_init)`, zero until the reference loss
/// has been recorded.
pub fn spci_coeff(state: &ScheduleState) -> Result<f64, SamplerError> {
    if state.total_epochs == 0 {
        return Err(SamplerError::ZeroEpochs);
    }
    if state.epoch > state.total_epochs {
        return Err(SamplerError::EpochOutOfRange {
            epoch: state.epoch,
            total: state.total_epochs,
        });
    }
    if state.l_init == Some(0.0) {
        return Err(SamplerError::ZeroReferenceLoss);
    }
    if state.epoch < SPCI_REFERENCE_EPOCH {
        return Ok(0.0);
    }
    let (Some(l_prev), Some(l_init)) = (state.l_prev, state.l_init) else {
        return Ok(0.0);
    };
    Ok(state.progress() * (1.0 - l_prev / l_init).max(0.0))
}

/// `clamp(v·(1 − x̂ − R), 0, v)`.
pub fn negative_distance(v: f64, x_hat: f64, r: f64) -> f64 {
    (v * (1.0 - x_hat - r)).clamp(0.0, v.max(0.0))
}

/// Point at distance `d` from `p_t` towards `p`, kept on the segment
/// `[p_t, p]`.
pub fn motion_line_point(p: Pixel, p_t: Pixel, d: f64) -> (f64, f64) {
    let v = p.dist(p_t);
    if v == 0.0 {
        return (p_t.x as f64, p_t.y as f64);
    }
    let d = d.clamp(0.0, v);
    let ux = (p.x - p_t.x) as f64 / v;
    let uy = (p.y - p_t.y) as f64 / v;
    (p_t.x as f64 + d * ux, p_t.y as f64 + d * uy)
}

/// Uniform integer pixel within Chebyshev distance [`NEGATIVE_RADIUS`] of
/// `center`, restricted to `width × height`, never equal to `p_t`. A centre
/// outside the image is first clamped onto it.
pub fn place_negative<R: Rng>(
    center: (f64, f64),
    p_t: Pixel,
    rng: &mut R,
    width: usize,
    height: usize,
) -> Result<Pixel, SamplerError> {
    let cx = center.0.clamp(0.0, (width - 1) as f64);
    let cy = center.1.clamp(0.0, (height - 1) as f64);
    let r = NEGATIVE_RADIUS as f64;
    let x_lo = ((cx - r).ceil() as i64).max(0);
    let x_hi = ((cx + r).floor() as i64).min(width as i64 - 1);
    let y_lo = ((cy - r).ceil() as i64).max(0);
    let y_hi = ((cy + r).floor() as i64).min(height as i64 - 1);
    for _ in 0..MAX_PLACEMENT_TRIES {
        let q = Pixel::new(rng.random_range(x_lo..=x_hi), rng.random_range(y_lo..=y_hi));
        if q != p_t {
            return Ok(q);
        }
    }
    Err(SamplerError::PlacementFailed { x: cx, y: cy })
}

/// One frame pair with forward ground truth from frame 1 to frame 2.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub frame1: GrayImage,
    pub frame2: GrayImage,
    pub gt: FlowField,
}

impl TrainingPair {
    pub fn new(frame1: GrayImage, frame2: GrayImage, gt: FlowField) -> Result<Self, SamplerError> {
        let same = |w: usize, h: usize| w == frame1.width() && h == frame1.height();
        if !same(frame2.width(), frame2.height()) || !same(gt.width(), gt.height()) {
            return Err(SamplerError::SizeMismatch);
        }
        Ok(Self { frame1, frame2, gt })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triplet {
    pub pair: usize,
    /// Frame-1 pixel.
    pub anchor: Pixel,
    /// Ground-truth match in frame 2, rounded to the nearest pixel.
    pub positive: Pixel,
    /// Frame-2 non-match.
    pub negative: Pixel,
    /// Centre the negative was drawn around.
    pub neg_center: (f64, f64),
    /// `‖positive − anchor‖`.
    pub v: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub patch_size: usize,
    pub lognormal: LogNormalParams,
    pub loss: LossConfig,
    /// Displacement cap at the first curriculum-by-displacement epoch.
    pub cur_disp_start: f64,
    /// Negative distance at the first / last curriculum-by-distance epoch.
    pub cur_dist_start: f64,
    pub cur_dist_end: f64,
    /// Loss percentile kept by the self-paced filter at the reference epoch.
    pub self_paced_percentile: f64,
    /// Candidate negatives per anchor for negative mining.
    pub mining_factor: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            patch_size: 31,
            lognormal: LogNormalParams::default(),
            loss: LossConfig::default(),
            cur_disp_start: 10.0,
            cur_dist_start: 64.0,
            cur_dist_end: 8.0,
            self_paced_percentile: 30.0,
            mining_factor: 2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Anchor {
    pair: usize,
    p: Pixel,
    p_t: Pixel,
    v: f64,
}

/// Every frame-1 pixel whose rounded ground-truth match lands inside frame 2.
fn anchor_pool(pairs: &[TrainingPair]) -> Vec<Anchor> {
    let mut pool = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let gt = &pair.gt;
        for y in 0..gt.height() {
            for x in 0..gt.width() {
                if !gt.is_valid(x, y) {
                    continue;
                }
                let (u, v) = gt.get(x, y);
                let p = Pixel::new(x as i64, y as i64);
                let p_t = Pixel::new((x as f64 + u).round() as i64, (y as f64 + v).round() as i64);
                if pair.frame2.contains(p_t) {
                    pool.push(Anchor {
                        pair: i,
                        p,
                        p_t,
                        v: p.dist(p_t),
                    });
                }
            }
        }
    }
    pool
}

/// RNG stream for one (seed, epoch) combination.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Normalized anchor/positive/negative patches of a triplet.
pub fn triplet_patches(pairs: &[TrainingPair], t: &Triplet, patch_size: usize) -> Result<TripletPatches, SamplerError> {
    let pair = &pairs[t.pair];
    let grab = |img: &GrayImage, p: Pixel| -> Result<Vec<f64>, ImageError> {
        Ok(normalize_patch(&extract_patch(img, p, patch_size)?).into_data())
    };
    Ok(TripletPatches {
        anchor: grab(&pair.frame1, t.anchor)?,
        positive: grab(&pair.frame2, t.positive)?,
        negative: grab(&pair.frame2, t.negative)?,
    })
}

fn random_direction_point<R: Rng>(rng: &mut R, from: Pixel, d: f64) -> (f64, f64) {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    (from.x as f64 + d * theta.cos(), from.y as f64 + d * theta.sin())
}

/// Per-triplet losses for candidate triplets under `net`.
fn candidate_losses(
    net: &DescriptorNet,
    pairs: &[TrainingPair],
    cands: &[Triplet],
    cfg: &SamplerConfig,
) -> Result<Vec<f64>, SamplerError> {
    cands
        .iter()
        .map(|t| {
            let tp = triplet_patches(pairs, t, cfg.patch_size)?;
            let a = net.forward(&tp.anchor)?;
            let p = net.forward(&tp.positive)?;
            let n = net.forward(&tp.negative)?;
            let dm = distance_with_grad(a.output(), p.output()).0;
            let dn = distance_with_grad(a.output(), n.output()).0;
            Ok(triplet_loss(dm, dn, &cfg.loss))
        })
        .collect()
}

fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = (pct / 100.0 * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

/// Builds `n` triplets for the epoch described by `state`.
pub fn build_triplets(
    pairs: &[TrainingPair],
    state: &ScheduleState,
    n: usize,
    net: Option<&DescriptorNet>,
    cfg: &SamplerConfig,
) -> Result<Vec<Triplet>, SamplerError> {
    if n < 2 {
        return Err(SamplerError::BatchTooSmall(n));
    }
    if state.strategy.needs_net() && net.is_none() {
        return Err(SamplerError::NetRequired(state.strategy));
    }
    let mut pool = anchor_pool(pairs);
    if pool.is_empty() {
        return Err(SamplerError::NoEligibleAnchors("valid ground truth".into()));
    }
    let mut rng = epoch_rng(state.seed, state.epoch);

    if state.strategy == Strategy::CurDisp {
        let v_max = pool.iter().map(|a| a.v).fold(0.0, f64::max);
        let cap = cfg.cur_disp_start + state.progress() * (v_max - cfg.cur_disp_start);
        pool.retain(|a| a.v <= cap);
        if pool.is_empty() {
            return Err(SamplerError::NoEligibleAnchors(format!("displacement <= {cap:.2}")));
        }
    }

    match state.strategy {
        Strategy::SelfPaced => self_paced(pairs, &pool, state, n, net.expect("checked"), cfg, &mut rng),
        Strategy::NegMine => negative_mining(pairs, &pool, n, net.expect("checked"), cfg, &mut rng),
        _ => {
            let anchors: Vec<Anchor> = (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect();
            place_all(pairs, &anchors, state, cfg, &mut rng)
        }
    }
}

fn place_all(
    pairs: &[TrainingPair],
    anchors: &[Anchor],
    state: &ScheduleState,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Triplet>, SamplerError> {
    let uses_line = matches!(state.strategy, Strategy::Interleave | Strategy::Spci | Strategy::Anti);
    let x_hat = if uses_line {
        sample_lognormal_normalized(rng, anchors.len(), cfg.lognormal)?
    } else {
        Vec::new()
    };
    let r_i = if state.strategy == Strategy::Spci {
        spci_coeff(state)?
    } else {
        0.0
    };
    let v_max_batch = anchors.iter().map(|a| a.v).fold(0.0, f64::max);
    let t = state.progress();
    let cur_dist = cfg.cur_dist_start * (1.0 - t) + cfg.cur_dist_end * t;

    anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let center = match state.strategy {
                Strategy::Interleave | Strategy::Spci => {
                    motion_line_point(a.p, a.p_t, negative_distance(a.v, x_hat[i], r_i))
                }
                Strategy::Anti => {
                    let d = (v_max_batch - a.v) * (1.0 - x_hat[i]);
                    if a.v > 0.0 {
                        let ux = (a.p.x - a.p_t.x) as f64 / a.v;
                        let uy = (a.p.y - a.p_t.y) as f64 / a.v;
                        (a.p_t.x as f64 + d * ux, a.p_t.y as f64 + d * uy)
                    } else {
                        random_direction_point(rng, a.p_t, d)
                    }
                }
                Strategy::CurDist => random_direction_point(rng, a.p_t, cur_dist),
                _ => (a.p_t.x as f64, a.p_t.y as f64),
            };
            let f2 = &pairs[a.pair].frame2;
            let negative = place_negative(center, a.p_t, rng, f2.width(), f2.height())?;
            Ok(Triplet {
                pair: a.pair,
                anchor: a.p,
                positive: a.p_t,
                negative,
                neg_center: center,
                v: a.v,
            })
        })
        .collect()
}

fn baseline_triplet(pairs: &[TrainingPair], a: &Anchor, rng: &mut ChaCha8Rng) -> Result<Triplet, SamplerError> {
    let center = (a.p_t.x as f64, a.p_t.y as f64);
    let f2 = &pairs[a.pair].frame2;
    let negative = place_negative(center, a.p_t, rng, f2.width(), f2.height())?;
    Ok(Triplet {
        pair: a.pair,
        anchor: a.p,
        positive: a.p_t,
        negative,
        neg_center: center,
        v: a.v,
    })
}

/// Keeps baseline triplets whose loss is at most a threshold that rises from
/// a low percentile at the reference epoch to "everything" at the last epoch.
fn self_paced(
    pairs: &[TrainingPair],
    pool: &[Anchor],
    state: &ScheduleState,
    n: usize,
    net: &DescriptorNet,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Triplet>, SamplerError> {
    let start = SPCI_REFERENCE_EPOCH as f64;
    let span = (state.total_epochs as f64 - start).max(1.0);
    let ramp = ((state.epoch as f64 - start) / span).clamp(0.0, 1.0);
    let pct = cfg.self_paced_percentile + ramp * (100.0 - cfg.self_paced_percentile);

    let mut kept = Vec::with_capacity(n);
    let mut threshold = None;
    for _ in 0..MAX_SELF_PACED_ROUNDS {
        let cands: Vec<Triplet> = (0..n)
            .map(|_| baseline_triplet(pairs, &pool[rng.random_range(0..pool.len())], rng))
            .collect::<Result<_, _>>()?;
        if ramp >= 1.0 {
            return Ok(cands);
        }
        let losses = candidate_losses(net, pairs, &cands, cfg)?;
        let tau = *threshold.get_or_insert_with(|| percentile(&losses, pct));
        for (t, l) in cands.into_iter().zip(losses) {
            if l <= tau && kept.len() < n {
                kept.push(t);
            }
        }
        if kept.len() == n {
            return Ok(kept);
        }
    }
    Err(SamplerError::SelfPacedStarved {
        kept: kept.len(),
        wanted: n,
    })
}

/// Draws `mining_factor` baseline negatives per anchor and keeps the one with
/// the highest triplet loss (first one on ties).
fn negative_mining(
    pairs: &[TrainingPair],
    pool: &[Anchor],
    n: usize,
    net: &DescriptorNet,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Triplet>, SamplerError> {
    let k = cfg.mining_factor.max(1);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let a = pool[rng.random_range(0..pool.len())];
        let cands: Vec<Triplet> = (0..k)
            .map(|_| baseline_triplet(pairs, &a, rng))
            .collect::<Result<_, _>>()?;
        let losses = candidate_losses(net, pairs, &cands, cfg)?;
        let mut best = 0;
        for (i, l) in losses.iter().enumerate() {
            if *l > losses[best] {
                best = i;
            }
        }
        out.push(cands[best]);
    }
    Ok(out)
}
