//! Mini-batch training with AdamW and a step learning-rate schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::model::{Model, PreparedImage};
use crate::nn::{ParamStore, Session};
use crate::scoring::{count_positives, focal_loss_sum, FocalConfig};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Zero-based epoch index from which the decayed rate applies.
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub focal: FocalConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 1e-4,
            decay_epoch: 10,
            decay_factor: 0.2,
            batch_size: 4,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            focal: FocalConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.focal.validate()?;
        if self.decay_epoch >= self.epochs {
            return Err(Error::Config(format!(
                "decay epoch {} must come before the last epoch ({} epochs)",
                self.decay_epoch, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

/// One training image: graph inputs plus targets (already masked for zero-shot).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: PreparedImage,
    pub labels: Vec<f64>,
    pub mask: Vec<f64>,
}

/// Unnormalized loss, positive count and parameter gradients of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrad {
    pub loss_sum: f64,
    pub positives: usize,
    pub grads: Vec<Option<Vec<f64>>>,
}

pub fn image_gradients(model: &Model, sample: &TrainSample, focal: FocalConfig) -> Result<ImageGrad> {
    let mut s = Session::new(&model.store, true);
    let logits = model.logits(&mut s, &sample.image)?;
    let loss = focal_loss_sum(&mut s, logits, &sample.labels, &sample.mask, focal)?;
    s.backward(loss)?;
    Ok(ImageGrad {
        loss_sum: s.value(loss).item(),
        positives: count_positives(&sample.labels),
        grads: s.param_grads(),
    })
}

/// Sums per-image results in order and divides by the batch's positive count.
/// Returns the batch loss and averaged gradients.
pub fn reduce_batch(parts: &[ImageGrad], num_params: usize) -> (f64, Vec<Option<Vec<f64>>>) {
    let positives: usize = parts.iter().map(|p| p.positives).sum();
    let norm = positives.max(1) as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; num_params];
    for part in parts {
        loss += part.loss_sum;
        for (acc, g) in grads.iter_mut().zip(&part.grads) {
            let Some(g) = g else { continue };
            match acc {
                Some(a) => a.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => *acc = Some(g.clone()),
            }
        }
    }
    for g in grads.iter_mut().flatten() {
        g.iter_mut().for_each(|x| *x /= norm);
    }
    (loss / norm, grads)
}

/// Adam with decoupled weight decay. Parameters without a gradient are left alone.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl AdamW {
    pub fn new(store: &ParamStore, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Self {
            betas,
            eps,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: vec![0; store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) {
        let (b1, b2) = self.betas;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let Some(g) = grads.get(k).and_then(Option::as_ref) else {
                continue;
            };
            if !store.is_trainable(id) {
                continue;
            }
            self.t[k] += 1;
            let t = self.t[k] as f64;
            let c1 = 1.0 - math::powf(b1, t);
            let c2 = 1.0 - math::powf(b2, t);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, w) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let update = (m[j] / c1) / (math::sqrt(v[j] / c2) + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
    }
}

/// Per-step record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Computes per-image gradients for a batch; lets callers run images in parallel.
pub trait BatchRunner {
    fn run(&self, model: &Model, batch: &[&TrainSample], focal: FocalConfig) -> Result<Vec<ImageGrad>>;
}

/// Runs images one after another.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl BatchRunner for Sequential {
    fn run(&self, model: &Model, batch: &[&TrainSample], focal: FocalConfig) -> Result<Vec<ImageGrad>> {
        batch.iter().map(|s| image_gradients(model, s, focal)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: AdamW,
    rng: ChaCha8Rng,
    pub step: usize,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: &Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(&model.store, config.betas, config.eps, config.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            optimizer,
            rng,
            step: 0,
            epoch: 0,
        })
    }

    /// One optimizer update on `batch`. A non-finite loss aborts with the step index.
    pub fn train_batch(&mut self, model: &mut Model, batch: &[&TrainSample], runner: &dyn BatchRunner) -> Result<StepLog> {
        let parts = match runner.run(model, batch, self.config.focal) {
            Ok(p) => p,
            Err(Error::Tensor(crate::tensor::TensorError::NonFinite { .. })) => {
                return Err(Error::NonFiniteLoss { step: self.step })
            }
            Err(e) => return Err(e),
        };
        let (loss, grads) = reduce_batch(&parts, model.store.len());
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        let lr = self.config.lr_at_epoch(self.epoch);
        self.optimizer.step(&mut model.store, &grads, lr);
        let log = StepLog {
            step: self.step,
            epoch: self.epoch,
            lr,
            loss,
        };
        self.step += 1;
        Ok(log)
    }

    /// One pass over `samples` in a seeded shuffled order.
    pub fn train_epoch(
        &mut self,
        model: &mut Model,
        samples: &[TrainSample],
        runner: &dyn BatchRunner,
        max_steps: Option<usize>,
    ) -> Result<Vec<StepLog>> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut logs = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            if max_steps.is_some_and(|m| self.step >= m) {
                break;
            }
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            logs.push(self.train_batch(model, &batch, runner)?);
        }
        self.epoch += 1;
        Ok(logs)
    }

    /// Runs all configured epochs, stopping early after `max_steps` updates.
    pub fn fit(
        &mut self,
        model: &mut Model,
        samples: &[TrainSample],
        runner: &dyn BatchRunner,
        max_steps: Option<usize>,
    ) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.config.epochs && !max_steps.is_some_and(|m| self.step >= m) {
            logs.extend(self.train_epoch(model, samples, runner, max_steps)?);
        }
        Ok(logs)
    }
}
