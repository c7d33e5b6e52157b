//! Minibatch behaviour-cloning loop shared by every policy.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::Policy;
use crate::autograd::{ParamId, ParamStore, SpikeForward, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One (observation, action) pair. The image is `[3, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub action: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        OptimizerConfig::Sgd { lr: 1e-2 }
    }

    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "sgd" => Ok(Self::sgd()),
            "adam" => Ok(Self::adam()),
            other => Err(Error::Config(format!("unknown optimizer {other:?} (expected sgd or adam)"))),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam()
    }
}

/// Optimiser state over the trainable parameters of one store.
pub struct Optimizer {
    config: OptimizerConfig,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let ids = store.trainable_ids();
        let moments = |ids: &[ParamId]| -> Vec<Vec<f64>> {
            match config {
                OptimizerConfig::Adam { .. } => ids.iter().map(|&id| vec![0.0; store.value(id).numel()]).collect(),
                OptimizerConfig::Sgd { .. } => Vec::new(),
            }
        };
        Self {
            config,
            m: moments(&ids),
            v: moments(&ids),
            ids,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` from the accumulated
    /// gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { .. } => {
                for &id in &self.ids {
                    let p = store.get_mut(id);
                    for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= lr * g;
                    }
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                let c1 = 1.0 - beta1.powi(self.step as i32);
                let c2 = 1.0 - beta2.powi(self.step as i32);
                for (k, &id) in self.ids.iter().enumerate() {
                    let p = store.get_mut(id);
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        store.zero_grad();
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to zero over all steps.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            optimizer: OptimizerConfig::adam(),
            schedule: LrSchedule::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let base = self.optimizer.lr();
        match self.schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub train_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Stacks samples into `[N, 3, H, W]` images and `[N, d]` targets.
pub fn stack_batch(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::Input("empty batch".into()))?;
    let img_shape = first.image.shape().to_vec();
    let d = first.action.len();
    let mut images = Vec::with_capacity(samples.len() * first.image.numel());
    let mut actions = Vec::with_capacity(samples.len() * d);
    for s in samples {
        if s.image.shape() != img_shape.as_slice() || s.action.len() != d {
            return Err(Error::dim(
                "stack_batch",
                format!("sample {:?}/{} vs {:?}/{d}", s.image.shape(), s.action.len(), img_shape),
            ));
        }
        images.extend_from_slice(s.image.data());
        actions.extend_from_slice(&s.action);
    }
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(&img_shape);
    Ok((Tensor::new(shape, images)?, Tensor::new(vec![samples.len(), d], actions)?))
}

/// Runs one forward/backward pass and leaves the gradients in the store.
pub fn loss_and_grad(policy: &mut dyn Policy, images: &Tensor, targets: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(images.clone())?;
    let y = policy.forward(&mut tape, x, true, SpikeForward::Binary)?;
    let loss = tape.mse(y, targets)?;
    let value = tape.value(loss).data()[0];
    tape.backward_into(loss, policy.store_mut())?;
    Ok(value)
}

/// Minimises the mean-squared action error. `on_epoch` sees each epoch's
/// metrics as soon as they are known.
pub fn train(
    policy: &mut dyn Policy,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let d = policy.action_dim();
    if let Some(bad) = data.iter().position(|s| s.action.len() != d) {
        return Err(Error::dim("train", format!("sample {bad} has {} action values, model expects {d}", data[bad].action.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut opt = Optimizer::new(cfg.optimizer, policy.store());
    policy.store_mut().zero_grad();
    let mut history = Vec::new();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut lr = cfg.lr_at(opt.steps_taken() as usize, total_steps);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let (images, targets) = stack_batch(&samples)?;
            let loss = match loss_and_grad(policy, &images, &targets) {
                Ok(l) if l.is_finite() => l,
                Ok(l) => return Err(diverged(epoch, batch, l, &history)),
                Err(Error::Numeric { .. }) => return Err(diverged(epoch, batch, f64::NAN, &history)),
                Err(e) => return Err(e),
            };
            history.push(loss);
            sum += loss;
            lr = cfg.lr_at(opt.steps_taken() as usize, total_steps);
            opt.step(policy.store_mut(), lr);
        }
        let m = EpochMetrics {
            epoch,
            train_loss: sum / batches_per_epoch as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&m)?;
        metrics.push(m);
    }
    Ok(metrics)
}

fn diverged(epoch: usize, batch: usize, loss: f64, history: &[f64]) -> Error {
    let tail = history.len().saturating_sub(20);
    Error::Diverged {
        epoch,
        batch,
        loss,
        history: history[tail..].to_vec(),
    }
}

/// Repeats one sample for `steps` full-batch updates and returns the loss
/// after each.
pub fn overfit(policy: &mut dyn Policy, sample: &Sample, steps: usize, optimizer: OptimizerConfig) -> Result<Vec<f64>> {
    let (images, targets) = stack_batch(&[sample])?;
    let mut opt = Optimizer::new(optimizer, policy.store());
    policy.store_mut().zero_grad();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let loss = loss_and_grad(policy, &images, &targets)?;
        if !loss.is_finite() {
            return Err(diverged(0, step, loss, &losses));
        }
        losses.push(loss);
        opt.step(policy.store_mut(), optimizer.lr());
    }
    Ok(losses)
}
