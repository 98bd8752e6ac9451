//! Mini-batch training and evaluation loops.
//!
//! Per-sample gradients are computed independently (in parallel when
//! enabled) and summed in sample order, so a run is bit-identical for any
//! worker count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::LossComponents;
use crate::metrics::{EvalReport, AR_BUDGETS, MAP_THRESHOLDS};
use crate::model::{Model, Prediction};
use crate::nn::Grads;
use crate::optim::{clip_grad_norm, AdamW, CosineSchedule};
use crate::par::{self, Execution};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub clip: f64,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: 2e-4,
            warmup_epochs: 5,
            weight_decay: 1e-4,
            clip: 1.0,
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.clip >= 0.0) {
            return Err(Error::Config("weight_decay and clip must be non-negative".into()));
        }
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> CosineSchedule {
        let spe = steps_per_epoch as u64;
        CosineSchedule { peak: self.lr, warmup: self.warmup_epochs as u64 * spe, total: self.epochs as u64 * spe }
    }
}

/// Sample order of `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Mean loss components and summed-then-averaged gradients of a batch.
pub fn batch_gradients(model: &Model, batch: &[&Sample], exec: Execution) -> Result<(LossComponents, Grads)> {
    let results = par::map(exec, batch, |_, s| model.loss_and_grads(&s.video, &s.audio, &s.gt));
    let k = 1.0 / batch.len().max(1) as f64;
    let mut mean = LossComponents::default();
    let mut grads = Grads::zeros_like(&model.store);
    for r in results {
        let (c, g) = r?;
        mean.add_scaled(&c, k);
        grads.accumulate(&g);
    }
    grads.scale(k);
    Ok((mean, grads))
}

pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub schedule: CosineSchedule,
    steps_per_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's training samples.
    pub loss: LossComponents,
    pub grad_norm: f64,
    pub report: Option<EvalReport>,
}

impl Trainer {
    pub fn new(model: &Model, config: TrainConfig, train_len: usize) -> Result<Self> {
        config.validate()?;
        let steps_per_epoch = train_len.div_ceil(config.batch_size).max(1);
        Ok(Self {
            optimizer: AdamW::new(&model.store, config.weight_decay),
            schedule: config.schedule(steps_per_epoch),
            steps_per_epoch,
            config,
        })
    }

    /// One pass over `train` (0-based `epoch`). Fails with a numeric error,
    /// leaving the model at its last finite step, when a loss or gradient
    /// stops being finite.
    pub fn epoch(&mut self, model: &mut Model, train: &[Sample], epoch: usize) -> Result<EpochLog> {
        let order = epoch_order(train.len(), self.config.seed, epoch);
        let mut sum = LossComponents::default();
        let mut last_norm = 0.0;
        let mut lr = self.schedule.lr((epoch * self.steps_per_epoch) as u64);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (mean, mut grads) = batch_gradients(model, &batch, self.config.execution)?;
            let norm = clip_grad_norm(&mut grads, self.config.clip);
            if !norm.is_finite() {
                return Err(Error::Numeric(format!("gradient norm became {norm} in epoch {}", epoch + 1)));
            }
            lr = self.schedule.lr(self.optimizer.steps());
            self.optimizer.step(&mut model.store, &grads, lr)?;
            if model.store.iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::Numeric(format!("parameters became non-finite in epoch {}", epoch + 1)));
            }
            sum.add_scaled(&mean, batch.len() as f64 / train.len() as f64);
            last_norm = norm;
        }
        Ok(EpochLog { epoch: epoch + 1, lr, loss: sum, grad_norm: last_norm, report: None })
    }
}

pub fn predict_all(model: &Model, samples: &[Sample], exec: Execution) -> Result<Vec<Prediction>> {
    par::map(exec, samples, |_, s| model.predict(&s.video, &s.audio)).into_iter().collect()
}

pub fn evaluate_predictions(
    preds: &[Prediction],
    samples: &[Sample],
    thresholds: &[f64],
    budgets: &[usize],
) -> Result<EvalReport> {
    let dets: Vec<_> = preds.iter().map(|p| p.detections.clone()).collect();
    let gts: Vec<_> = samples.iter().map(|s| s.gt.segments.clone()).collect();
    let scores: Vec<f64> = preds.iter().map(|p| p.video_score).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.gt.label).collect();
    EvalReport::compute(&dets, &gts, &scores, &labels, thresholds, budgets)
}

/// Report at the default thresholds and budgets.
pub fn evaluate(model: &Model, samples: &[Sample], exec: Execution) -> Result<EvalReport> {
    let preds = predict_all(model, samples, exec)?;
    evaluate_predictions(&preds, samples, &MAP_THRESHOLDS, &AR_BUDGETS)
}

/// Outcome of [`fit`]: the best-mAP parameters are left in `best`.
pub struct FitResult {
    pub logs: Vec<EpochLog>,
    pub best: Option<(usize, f64)>,
    pub best_store: crate::nn::ParamStore,
}

/// Trains for `config.epochs`, evaluating on `test` after each epoch.
/// `on_epoch(log, model, improved)` runs after every epoch, e.g. to write a
/// log row and checkpoint; `improved` marks a new best mAP.
pub fn fit(
    model: &mut Model,
    train: &[Sample],
    test: &[Sample],
    config: TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Model, bool) -> Result<()>,
) -> Result<FitResult> {
    let exec = config.execution;
    let epochs = config.epochs;
    let mut trainer = Trainer::new(model, config, train.len())?;
    let mut logs = Vec::with_capacity(epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut best_store = model.store.clone();
    for e in 0..epochs {
        let mut log = trainer.epoch(model, train, e)?;
        let report = if test.is_empty() { None } else { Some(evaluate(model, test, exec)?) };
        let map = report.as_ref().and_then(|r| r.map);
        let improved = match (map, best) {
            (Some(m), Some((_, b))) => m > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = Some((log.epoch, map.expect("improved implies a value")));
            best_store = model.store.clone();
        }
        log.report = report;
        log::info!(
            "epoch {}: loss {:.5} (match {:.5}, cls {:.5}, enh {:.5}, coop {:.5}) lr {:.3e}{}",
            log.epoch,
            log.loss.total,
            log.loss.matching,
            log.loss.classification,
            log.loss.enhance,
            log.loss.cooperation,
            log.lr,
            log.report.as_ref().map(|r| format!(" | {}", r.summary())).unwrap_or_default()
        );
        on_epoch(&log, model, improved)?;
        logs.push(log);
    }
    Ok(FitResult { logs, best, best_store })
}
