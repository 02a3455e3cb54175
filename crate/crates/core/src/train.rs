//! The training loop: embed a minibatch, score it against memory, take an
//! SGD step, fold the embeddings back into memory, and refresh the pseudo
//! labels once per epoch after warmup.

use log::{debug, error};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{singleton_labels, MultiLabel, Predictor};
use crate::loss::{compute_loss, LossConfig};
use crate::memory::{FeatureVector, MemoryBank};
use crate::model::{EmbeddingModel, ModelGrad};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub epochs: usize,
    /// Epochs trained on singleton labels before the predictor takes over.
    pub warmup_epochs: usize,
    pub lr: f64,
    /// Epoch from which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 40,
            warmup_epochs: 5,
            lr: 0.3,
            lr_decay_epoch: 30,
            lr_decay_factor: 0.1,
            batch_size: 64,
            alpha_start: 0.0,
            alpha_end: 0.5,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::config(format!(
                "batch_size must lie in [1, {n}], got {}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config("lr_decay_factor must lie in (0, 1]"));
        }
        for a in [self.alpha_start, self.alpha_end] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config(format!("alpha schedule endpoints must lie in [0, 1], got {a}")));
            }
        }
        Ok(())
    }

    /// Memory update rate for `epoch`, linear from start to end.
    pub fn alpha(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.alpha_end;
        }
        let frac = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        self.alpha_start + (self.alpha_end - self.alpha_start) * frac
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }
}

/// Feature-space augmentation: additive Gaussian jitter plus coordinate
/// dropout (dropped coordinates are zeroed, not rescaled).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub sigma: f64,
    pub drop_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            sigma: 0.05,
            drop_prob: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            sigma: 0.0,
            drop_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("augment sigma must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::config("augment drop_prob must lie in [0, 1)"));
        }
        Ok(())
    }
}

pub fn augment<R: Rng + ?Sized>(x: ArrayView1<f64>, cfg: &AugmentConfig, rng: &mut R) -> Array1<f64> {
    let mut out = x.to_owned();
    if cfg.sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.sigma).expect("validated sigma");
        out.mapv_inplace(|v| v + normal.sample(rng));
    }
    if cfg.drop_prob > 0.0 {
        out.mapv_inplace(|v| if rng.random::<f64>() < cfg.drop_prob { 0.0 } else { v });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub schedule: TrainSchedule,
    pub loss: LossConfig,
    pub predictor: Predictor,
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub alpha: f64,
    pub lr: f64,
    /// Mean positive-set size of the labels trained on this epoch.
    pub mean_positives: f64,
    pub labels_refreshed: bool,
}

/// Mutable training state. Observations carry no identity information.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainerConfig,
    observations: Array2<f64>,
    model: EmbeddingModel,
    bank: MemoryBank,
    labels: Vec<MultiLabel>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(observations: Array2<f64>, model: EmbeddingModel, cfg: TrainerConfig, seed: u64) -> Result<Self> {
        let n = observations.nrows();
        cfg.schedule.validate(n)?;
        cfg.loss.validate()?;
        cfg.augment.validate()?;
        if observations.ncols() != model.input_dim() {
            return Err(Error::config(format!(
                "observations have dimension {}, model expects {}",
                observations.ncols(),
                model.input_dim()
            )));
        }
        let bank = MemoryBank::new(n, model.output_dim())?;
        Ok(Self {
            cfg,
            observations,
            bank,
            labels: singleton_labels(n),
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
        })
    }

    pub fn model(&self) -> &EmbeddingModel {
        &self.model
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn labels(&self) -> &[MultiLabel] {
        &self.labels
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    /// Index of the next epoch to run.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.schedule.epochs
    }

    /// Labels the configured predictor would train on in `epoch`, given the
    /// current bank.
    pub fn labels_for_epoch(&self, predictor: &Predictor, epoch: usize) -> Result<Vec<MultiLabel>> {
        if epoch < self.cfg.schedule.warmup_epochs || matches!(predictor, Predictor::SingleLabel) {
            return Ok(singleton_labels(self.bank.len()));
        }
        if !self.bank.is_populated() {
            return Err(Error::Precondition(
                "label prediction requested before every memory row was written".into(),
            ));
        }
        predictor.predict_all(&self.bank)
    }

    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let epoch = self.epoch;
        let sched = self.cfg.schedule.clone();
        if epoch >= sched.epochs {
            return Err(Error::Precondition(format!("all {} epochs already ran", sched.epochs)));
        }
        let refresh = epoch >= sched.warmup_epochs && !matches!(self.cfg.predictor, Predictor::SingleLabel);
        // A failed epoch leaves the trainer as it was after the previous one.
        let snapshot = (self.model.clone(), self.bank.clone(), self.labels.clone());
        if refresh {
            // predict_all reads an immutable borrow: a frozen snapshot.
            self.labels = self.labels_for_epoch(&self.cfg.predictor, epoch)?;
        }
        let alpha = sched.alpha(epoch);
        let lr = sched.lr_at(epoch);
        self.bank.set_update_rate(alpha)?;
        self.bank.set_epoch(epoch);

        let n = self.observations.nrows();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (it, batch) in order.chunks(sched.batch_size).enumerate() {
            let loss = self.step(batch, alpha, lr).map_err(|e| {
                (self.model, self.bank, self.labels) = snapshot.clone();
                e
            });
            let loss = loss.map_err(|e| match e {
                Error::Numeric(msg) => {
                    error!("epoch {epoch} iteration {it}: {msg}; batch = {batch:?}");
                    Error::Diverged {
                        epoch,
                        iteration: it,
                        msg,
                    }
                }
                other => other,
            })?;
            loss_sum += loss;
            batches += 1;
        }
        self.epoch += 1;
        let stats = EpochStats {
            epoch,
            loss: loss_sum / batches as f64,
            alpha,
            lr,
            mean_positives: self.labels.iter().map(|l| l.len() as f64).sum::<f64>() / n as f64,
            labels_refreshed: refresh,
        };
        debug!("{stats:?}");
        Ok(stats)
    }

    fn step(&mut self, batch: &[usize], alpha: f64, lr: f64) -> Result<f64> {
        let mut inputs = Vec::with_capacity(batch.len());
        let mut traces = Vec::with_capacity(batch.len());
        let mut feats = Array2::zeros((batch.len(), self.model.output_dim()));
        for (k, &i) in batch.iter().enumerate() {
            let x = augment(self.observations.row(i), &self.cfg.augment, &mut self.rng);
            let t = self.model.trace(x.view())?;
            feats.row_mut(k).assign(&t.output.view());
            inputs.push(x);
            traces.push(t);
        }
        let labels: Vec<MultiLabel> = batch.iter().map(|&i| self.labels[i].clone()).collect();
        let report = compute_loss(feats.view(), &labels, &self.bank, &self.cfg.loss)?;
        if !report.value.is_finite() || !report.grad.iter().all(|g| g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss {} (finite gradient: {})",
                report.value,
                report.grad.iter().all(|g| g.is_finite())
            )));
        }
        let mut grad = ModelGrad::zeros_like(&self.model);
        for ((x, t), g) in inputs.iter().zip(&traces).zip(report.grad.rows()) {
            grad.add_assign(&self.model.backward_from(x.view(), t, g)?);
        }
        if !grad.is_finite() {
            return Err(Error::Numeric("non-finite parameter gradient".into()));
        }
        self.model.sgd_step(&grad, lr);
        for (&i, t) in batch.iter().zip(traces) {
            let f: FeatureVector = t.output;
            self.bank.bootstrap_row(i, &f)?;
            self.bank.update_row(i, &f, alpha)?;
        }
        Ok(report.value)
    }
}

/// Mean loss of `model` on a fixed batch as a function of its parameters.
/// Used by gradient checks; the bank is held constant.
pub fn batch_loss(
    model: &EmbeddingModel,
    inputs: ArrayView2<f64>,
    labels: &[MultiLabel],
    bank: &MemoryBank,
    loss: &LossConfig,
) -> Result<(f64, ModelGrad)> {
    let mut traces = Vec::with_capacity(inputs.nrows());
    let mut feats = Array2::zeros((inputs.nrows(), model.output_dim()));
    for (k, x) in inputs.rows().into_iter().enumerate() {
        let t = model.trace(x)?;
        feats.row_mut(k).assign(&t.output.view());
        traces.push(t);
    }
    let report = compute_loss(feats.view(), labels, bank, loss)?;
    let mut grad = ModelGrad::zeros_like(model);
    for ((x, t), g) in inputs.rows().into_iter().zip(&traces).zip(report.grad.rows()) {
        grad.add_assign(&model.backward_from(x, t, g)?);
    }
    Ok((report.value, grad))
}
