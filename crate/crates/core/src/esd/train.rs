//! Unsupervised training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{EsdModel, LossTerms, Prepared};
use crate::autodiff::{Adam, AdamState, PlateauScheduler};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::signal_model::VoxelBatch;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub train: LossTerms,
    pub val: LossTerms,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Optimizer state at the best epoch.
    pub adam: AdamState,
}

/// [`train_with`] without a progress callback.
pub fn train(model: &mut EsdModel, train: &VoxelBatch, val: &VoxelBatch) -> Result<TrainReport> {
    train_with(model, train, val, |_| {})
}

/// Minimizes the loss over `train` with Adam, halving the learning rate on
/// validation plateaus. The model is left holding the parameters of the
/// epoch with the lowest validation loss.
pub fn train_with(
    model: &mut EsdModel,
    train: &VoxelBatch,
    val: &VoxelBatch,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    if train.n_voxels() == 0 || val.n_voxels() == 0 {
        return Err(Error::invalid("training needs nonempty train and validation splits"));
    }
    let tr = model.prepare(train)?;
    let va = model.prepare(val)?;
    let cfg = model.config().clone();
    let mut adam = Adam::new(model.net().params(), cfg.lr);
    let mut sched = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut best = (0, f64::INFINITY, model.net().params().clone(), model.net().bn_stats().to_vec(), adam.state.clone());
    let mut log = Vec::with_capacity(cfg.max_epochs);
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..tr.n_voxels()).collect();
        order.shuffle(&mut substream(cfg.seed, "shuffle", epoch as u64));
        let mut sum = LossTerms::default();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let terms = step(model, &tr, chunk, &mut adam).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, batch {bi}: {m}")),
                e => e,
            })?;
            sum = sum.add(terms.scaled(chunk.len() as f64));
        }
        let train_terms = sum.scaled(1.0 / tr.n_voxels() as f64);
        let val_terms = model.evaluate_loss(&va)?;
        if let Some(term) = val_terms.first_non_finite() {
            return Err(Error::Numerical(format!("epoch {epoch}: validation {term} loss is not finite")));
        }
        let record = EpochRecord {
            epoch,
            lr: adam.lr,
            train: train_terms,
            val: val_terms,
        };
        on_epoch(&record);
        log.push(record);
        if val_terms.total < best.1 {
            best = (
                epoch,
                val_terms.total,
                model.net().params().clone(),
                model.net().bn_stats().to_vec(),
                adam.state.clone(),
            );
        }
        adam.lr = sched.observe(val_terms.total, adam.lr);
    }
    let (best_epoch, best_val_loss, params, bn, state) = best;
    model.net_mut().load_state(params, bn)?;
    Ok(TrainReport {
        log,
        best_epoch,
        best_val_loss,
        adam: state,
    })
}

fn step(model: &mut EsdModel, data: &Prepared, chunk: &[usize], adam: &mut Adam) -> Result<LossTerms> {
    let (values, grads, bn) = model.gradients(data, chunk, true)?;
    let net = model.net_mut();
    adam.step(net.params_mut(), &grads)?;
    net.set_bn_stats(bn)?;
    Ok(values)
}
