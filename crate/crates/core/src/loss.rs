//! Triplet hinge loss and its batch standard-deviation variant.
//!
//! `L_H = mean(max(0, m + d_match - d_nonmatch))` and
//! `L = λ·L_H + (1 − λ)·(σ(d_match) + σ(d_nonmatch))` with population σ.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("distance batches must be non-empty")]
    Empty,
    #[error("distance batches differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("margin must be positive, got {0}")]
    BadMargin(f64),
    #[error("mix must lie in [0,1], got {0}")]
    BadMix(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 100.0,
            lambda: 0.8,
        }
    }
}

impl LossConfig {
    pub fn new(margin: f64, lambda: f64) -> Result<Self, LossError> {
        let cfg = Self { margin, lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(LossError::BadMargin(self.margin));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LossError::BadMix(self.lambda));
        }
        Ok(())
    }
}

fn check_pair(d_match: &[f64], d_nonmatch: &[f64]) -> Result<(), LossError> {
    if d_match.len() != d_nonmatch.len() {
        return Err(LossError::LengthMismatch(d_match.len(), d_nonmatch.len()));
    }
    if d_match.is_empty() {
        return Err(LossError::Empty);
    }
    Ok(())
}

pub fn hinge_loss(d_match: &[f64], d_nonmatch: &[f64], margin: f64) -> Result<f64, LossError> {
    check_pair(d_match, d_nonmatch)?;
    let total: f64 = d_match
        .iter()
        .zip(d_nonmatch)
        .map(|(dm, dn)| (margin + dm - dn).max(0.0))
        .sum();
    Ok(total / d_match.len() as f64)
}

/// Population standard deviation; a singleton batch has σ = 0.
pub fn batch_sd(values: &[f64]) -> Result<f64, LossError> {
    if values.is_empty() {
        return Err(LossError::Empty);
    }
    Ok(mean_sd(values).1)
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn hinge_sd_loss(d_match: &[f64], d_nonmatch: &[f64], cfg: &LossConfig) -> Result<f64, LossError> {
    let hinge = hinge_loss(d_match, d_nonmatch, cfg.margin)?;
    let sd = batch_sd(d_match)? + batch_sd(d_nonmatch)?;
    Ok(cfg.lambda * hinge + (1.0 - cfg.lambda) * sd)
}

/// Loss of a single triplet in isolation (both σ terms vanish).
pub fn triplet_loss(d_match: f64, d_nonmatch: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda * (cfg.margin + d_match - d_nonmatch).max(0.0)
}

/// Value and partial derivatives of [`hinge_sd_loss`] with respect to each
/// distance. The hinge kink and a zero σ both take a zero subgradient.
pub fn hinge_sd_loss_grad(
    d_match: &[f64],
    d_nonmatch: &[f64],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>), LossError> {
    let loss = hinge_sd_loss(d_match, d_nonmatch, cfg)?;
    let n = d_match.len() as f64;
    let (mean_m, sd_m) = mean_sd(d_match);
    let (mean_n, sd_n) = mean_sd(d_nonmatch);
    let sd_term = |d: f64, mean: f64, sd: f64| {
        if sd > 0.0 {
            (1.0 - cfg.lambda) * (d - mean) / (n * sd)
        } else {
            0.0
        }
    };
    let mut g_match = Vec::with_capacity(d_match.len());
    let mut g_nonmatch = Vec::with_capacity(d_match.len());
    for (&dm, &dn) in d_match.iter().zip(d_nonmatch) {
        let active = if cfg.margin + dm - dn > 0.0 {
            cfg.lambda / n
        } else {
            0.0
        };
        g_match.push(active + sd_term(dm, mean_m, sd_m));
        g_nonmatch.push(-active + sd_term(dn, mean_n, sd_n));
    }
    Ok((loss, g_match, g_nonmatch))
}
