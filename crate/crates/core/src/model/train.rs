use crate::error::{Error, Result};
use crate::nn::{contrastive_loss, Adam, PlateauScheduler};
use crate::pipeline::{batch_iter, MfccWindow, SamplePair, UltrasoundWindow};

use super::{UltraSyncModel, EMBED_BATCH};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    /// Pairs closer than this are classified as synchronised.
    pub distance_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            plateau_factor: 0.1,
            plateau_patience: 2,
            plateau_threshold: 1e-4,
            distance_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when there is no validation data.
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// Parameters from the epoch with the lowest monitored loss.
    pub best: UltraSyncModel,
    /// 0 when no epoch completed.
    pub best_epoch: usize,
    pub steps: u64,
    pub final_lr: f64,
    /// `(epoch, step)` of a non-finite loss or gradient. The trained model is
    /// then rolled back to the start of that epoch.
    pub diverged: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMetrics {
    pub loss: f64,
    /// Fraction of pairs whose thresholded distance matches the label.
    pub accuracy: f64,
    pub n: usize,
}

/// Eval-mode contrastive loss and thresholded accuracy over a pair list.
pub fn evaluate_pairs(model: &UltraSyncModel, pairs: &[SamplePair], threshold: f64) -> Result<PairMetrics> {
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in pairs.chunks(EMBED_BATCH) {
        let u: Vec<&UltrasoundWindow> = chunk.iter().map(|p| p.ultra.as_ref()).collect();
        let m: Vec<&MfccWindow> = chunk.iter().map(|p| p.mfcc.as_ref()).collect();
        let labels: Vec<u8> = chunk.iter().map(|p| p.label).collect();
        let v = model.net.visual.infer(&model.ultra_tensor(&u)?)?;
        let a = model.net.audio.infer(&model.mfcc_tensor(&m)?)?;
        let out = contrastive_loss(&v, &a, &labels)?;
        loss += out.loss * chunk.len() as f64;
        correct += out
            .distances
            .iter()
            .zip(&labels)
            .filter(|(&d, &y)| (d < threshold) == (y == 1))
            .count();
    }
    let n = pairs.len();
    Ok(PairMetrics {
        loss: if n == 0 { f64::NAN } else { loss / n as f64 },
        accuracy: if n == 0 { f64::NAN } else { correct as f64 / n as f64 },
        n,
    })
}

/// Adam on balanced batches, one plateau-scheduler step per epoch on the
/// validation loss (training loss when no validation pairs are given).
pub fn train(
    model: &mut UltraSyncModel,
    train_pairs: &[SamplePair],
    val_pairs: &[SamplePair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let mut adam = Adam::new(cfg.lr);
    let mut sched = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut diverged = None;
    if cfg.epochs > 0 && train_pairs.len() < 2 {
        return Err(Error::Config("training needs at least two pairs".into()));
    }

    'epochs: for epoch in 1..=cfg.epochs {
        let last_good = model.net.clone();
        let lr = adam.lr;
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in batch_iter(train_pairs, cfg.batch_size, cfg.seed, epoch as u64)? {
            // batch statistics need two samples
            if batch.len() < 2 {
                continue;
            }
            let u: Vec<&UltrasoundWindow> = batch.iter().map(|p| p.ultra.as_ref()).collect();
            let m: Vec<&MfccWindow> = batch.iter().map(|p| p.mfcc.as_ref()).collect();
            let labels: Vec<u8> = batch.iter().map(|p| p.label).collect();
            let ut = model.ultra_tensor(&u)?;
            let mt = model.mfcc_tensor(&m)?;
            let loss = model.net.loss_and_backward(ut, mt, &labels)?;
            let step = adam.t as usize + 1;
            let stepped = if loss.is_finite() {
                adam.step(model.net.params_mut())
            } else {
                Err(Error::TrainingDiverged { epoch, step })
            };
            if stepped.is_err() {
                log::error!("non-finite loss or gradient at epoch {epoch}, step {step}; rolling back");
                model.net = last_good;
                diverged = Some((epoch, step));
                break 'epochs;
            }
            sum += loss * batch.len() as f64;
            count += batch.len();
        }
        let train_loss = sum / count.max(1) as f64;
        let val = evaluate_pairs(model, val_pairs, cfg.distance_threshold)?;
        let monitored = if val.n > 0 { val.loss } else { train_loss };
        if monitored < best_loss {
            best_loss = monitored;
            best_epoch = epoch;
            best = model.clone();
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss: val.loss,
            lr,
            val_accuracy: val.accuracy,
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.5} val {:.5} acc {:.4} lr {lr:e}",
            val.loss,
            val.accuracy
        );
        log.push(rec);
        adam.lr *= sched.step(monitored);
    }

    Ok(TrainOutcome {
        log,
        best,
        best_epoch,
        steps: adam.t,
        final_lr: adam.lr,
        diverged,
    })
}
