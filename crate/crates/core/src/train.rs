//! Epoch loop for descriptor training under a negative-sampling schedule.
//!
//! Each epoch draws a fresh triplet budget from the sampler, holds out a
//! fixed fraction for validation, runs minibatch SGD on the rest and then
//! scores the held-out triplets. The validation loss of
//! [`SPCI_REFERENCE_EPOCH`] becomes the reference loss `l_init` and every
//! epoch's loss is fed back as `l_prev` for the next one.

use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::loss::{hinge_sd_loss, LossError};
use crate::net::{loss_and_grad, sgd_step, triplet_distances, Architecture, DescriptorNet, NetError, OptState};
use crate::sampler::{
    build_triplets, spci_coeff, triplet_patches, SamplerConfig, SamplerError, ScheduleState, Strategy, Triplet,
    TrainingPair, SPCI_REFERENCE_EPOCH,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub triplets_per_epoch: usize,
    pub batch_size: usize,
    pub architecture: Architecture,
    pub sampler: SamplerConfig,
    pub lr: f64,
    pub momentum: f64,
    /// Learning rate halves every this many epochs (0 disables).
    pub lr_halve_every: usize,
    /// Share of each epoch's triplets held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sampler = SamplerConfig::default();
        Self {
            strategy: Strategy::Baseline,
            epochs: 100,
            triplets_per_epoch: 5000,
            batch_size: 64,
            architecture: Architecture::desk(sampler.patch_size),
            sampler,
            lr: 0.01,
            momentum: 0.9,
            lr_halve_every: 100,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("validation fraction must lie in [0,1)");
        }
        if self.architecture.input_size != self.sampler.patch_size {
            return bad("network input size differs from patch size");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning rate must be positive and momentum in [0,1)");
        }
        let held = self.held_out();
        if held < 2 || self.triplets_per_epoch - held < 2 {
            return bad("triplet budget too small for the validation split");
        }
        self.sampler.loss.validate()?;
        Ok(())
    }

    fn held_out(&self) -> usize {
        ((self.triplets_per_epoch as f64 * self.val_fraction).round() as usize).max(2)
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub l_init: Option<f64>,
    pub r_i: f64,
    pub lr: f64,
}

fn batch_loss(
    net: &DescriptorNet,
    pairs: &[TrainingPair],
    triplets: &[Triplet],
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let patches = triplets
        .iter()
        .map(|t| triplet_patches(pairs, t, cfg.sampler.patch_size))
        .collect::<Result<Vec<_>, _>>()?;
    let (dm, dn) = triplet_distances(net, &patches)?;
    Ok(hinge_sd_loss(&dm, &dn, &cfg.sampler.loss)?)
}

pub fn train(pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<(DescriptorNet, Vec<EpochRecord>), TrainError> {
    let net = DescriptorNet::new(cfg.architecture.clone(), cfg.seed)?;
    train_from(pairs, cfg, net, |_, _| {})
}

/// Trains `net` in place, calling `on_epoch` after every epoch.
pub fn train_from(
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    mut net: DescriptorNet,
    mut on_epoch: impl FnMut(&EpochRecord, &DescriptorNet),
) -> Result<(DescriptorNet, Vec<EpochRecord>), TrainError> {
    cfg.validate()?;
    let mut opt = OptState::new(net.param_count(), cfg.lr, cfg.momentum);
    opt.halve_every = cfg.lr_halve_every;
    let mut state = ScheduleState::new(cfg.strategy, 0, cfg.epochs, cfg.seed);
    let held = cfg.held_out();
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        state.epoch = epoch;
        let r_i = if cfg.strategy == Strategy::Spci {
            spci_coeff(&state)?
        } else {
            0.0
        };
        let scorer = cfg.strategy.needs_net().then_some(&net);
        let mut triplets = build_triplets(pairs, &state, cfg.triplets_per_epoch, scorer, &cfg.sampler)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 << 32 | epoch as u64);
        triplets.shuffle(&mut rng);
        let val = triplets.split_off(triplets.len() - held);

        let lr = opt.lr();
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in triplets.chunks(cfg.batch_size) {
            if chunk.len() < 2 && batches > 0 {
                continue;
            }
            let patches = chunk
                .iter()
                .map(|t| triplet_patches(pairs, t, cfg.sampler.patch_size))
                .collect::<Result<Vec<_>, _>>()?;
            let (loss, grads) = loss_and_grad(&net, &patches, &cfg.sampler.loss)?;
            sgd_step(&mut net, &grads, &mut opt)?;
            total += loss;
            batches += 1;
        }
        opt.next_epoch();

        let val_loss = batch_loss(&net, pairs, &val, cfg)?;
        if epoch == SPCI_REFERENCE_EPOCH {
            state.l_init = Some(val_loss);
        }
        state.l_prev = Some(val_loss);
        let rec = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_loss,
            l_init: state.l_init,
            r_i,
            lr,
        };
        on_epoch(&rec, &net);
        records.push(rec);
    }
    Ok((net, records))
}

pub const LOSS_CSV_HEADER: &str = "epoch,train_loss,val_loss,l_init,r_i,lr";

pub fn write_loss_csv<W: Write>(mut w: W, records: &[EpochRecord]) -> io::Result<()> {
    writeln!(w, "{LOSS_CSV_HEADER}")?;
    for r in records {
        let l_init = r.l_init.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{},{}", r.epoch, r.train_loss, r.val_loss, l_init, r.r_i, r.lr)?;
    }
    Ok(())
}
