//! Optimizers and the epoch loop.
//!
//! Weights whose mask bit is off are never touched by an optimizer step, so they stay
//! bit-identical (zero) until growth switches them on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, Dataset};
use crate::error::{Error, Result};
use crate::flops::{flops_estimate, Phase};
use crate::model::{MaskedNetwork, Mode};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    #[serde(rename = "adamw")]
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Cosine decay to zero over the phase's epochs; rough phases use the base rate.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    /// L2 penalty on masked weights only (decoupled for AdamW).
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: 0.9,
            nesterov: false,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 128,
            schedule: Schedule::Constant,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("optimizer.{field}: {why}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2", "must lie in [0, 1)");
        }
        if self.eps <= 0.0 {
            return bad("eps", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine if total > 0 => {
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
            }
            Schedule::Cosine => self.lr,
        }
    }
}

/// First and second moment buffers, one per parameter tensor.
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with `grads` ordered as [`MaskedNetwork::params_mut`].
    pub fn step(&mut self, net: &mut MaskedNetwork<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        let mut slots = net.params_mut();
        if grads.len() != slots.len() {
            return Err(Error::Usage(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                slots.len()
            )));
        }
        if self.m.len() != slots.len() {
            self.m = slots.iter().map(|s| vec![T::zero(); s.data.len()]).collect();
            self.v = slots.iter().map(|s| vec![T::zero(); s.data.len()]).collect();
        }
        self.t += 1;
        let c = &self.cfg;
        let lr_t = T::of(lr);
        let (b1, b2, eps) = (T::of(c.beta1), T::of(c.beta2), T::of(c.eps));
        let bc1 = T::of(1.0 - c.beta1.powi(self.t.min(i32::MAX as u64) as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.t.min(i32::MAX as u64) as i32));
        let mom = T::of(c.momentum);
        for (k, (slot, g)) in slots.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let g = g.data();
            let decay = if slot.mask.is_some() { T::of(c.weight_decay) } else { T::zero() };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..slot.data.len() {
                if slot.mask.is_some_and(|mask| !mask[i]) {
                    continue;
                }
                let w = slot.data[i];
                match c.kind {
                    OptimizerKind::Sgd => {
                        let gi = g[i] + decay * w;
                        let d = if mom > T::zero() {
                            m[i] = mom * m[i] + gi;
                            if c.nesterov {
                                gi + mom * m[i]
                            } else {
                                m[i]
                            }
                        } else {
                            gi
                        };
                        slot.data[i] = w - lr_t * d;
                    }
                    OptimizerKind::Adam | OptimizerKind::AdamW => {
                        let gi = if c.kind == OptimizerKind::Adam { g[i] + decay * w } else { g[i] };
                        m[i] = b1 * m[i] + (T::one() - b1) * gi;
                        v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                        let upd = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                        let mut nw = w - lr_t * upd;
                        if c.kind == OptimizerKind::AdamW {
                            nw = nw - lr_t * decay * w;
                        }
                        slot.data[i] = nw;
                    }
                }
            }
        }
        Ok(())
    }
}

/// How long a rough training phase lasts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RoughTrainPolicy {
    Fixed { epochs: usize },
    /// Stops once validation loss has failed to improve for `patience` consecutive
    /// epochs, or at `max_epochs`.
    Adaptive { patience: usize, max_epochs: usize },
}

impl Default for RoughTrainPolicy {
    fn default() -> Self {
        RoughTrainPolicy::Adaptive {
            patience: 3,
            max_epochs: 30,
        }
    }
}

impl RoughTrainPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RoughTrainPolicy::Fixed { epochs: 0 } => Err(Error::Config("rough.epochs must be positive".into())),
            RoughTrainPolicy::Adaptive { patience, max_epochs } if patience == 0 || max_epochs == 0 => Err(
                Error::Config("rough.patience and rough.max_epochs must be positive".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn max_epochs(&self) -> usize {
        match *self {
            RoughTrainPolicy::Fixed { epochs } => epochs,
            RoughTrainPolicy::Adaptive { max_epochs, .. } => max_epochs,
        }
    }
}

/// Tracks the adaptive stopping condition across epochs.
#[derive(Clone, Debug)]
pub struct PatienceTracker {
    patience: usize,
    best: f64,
    stale: usize,
}

impl PatienceTracker {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records one validation loss; true once `patience` consecutive epochs failed
    /// to improve on the best so far.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Epoch index within the phase.
    pub epoch: usize,
    pub density: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub flops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseOutcome {
    pub epochs: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub flops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    /// Random horizontal flips of `[H, W, C]` examples.
    pub flip: bool,
    pub bn_momentum: f64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            flip: false,
            bn_momentum: 0.1,
            eval_batch: 1000,
        }
    }
}

/// Mean loss and accuracy with running statistics.
pub fn evaluate<T: Scalar>(net: &MaskedNetwork<T>, ds: &Dataset, batch: usize) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = ds.batch::<T>(chunk, None)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let bound = net.bind(&mut tape, xv, Mode::Eval, false)?;
        let l = tape.softmax_cross_entropy(bound.output, &y)?;
        loss += tape.value(l).item()?.as_f64() * chunk.len() as f64;
        let out = tape.value(bound.output);
        let k = out.shape()[1];
        for (r, &label) in y.iter().enumerate() {
            let row = &out.data()[r * k..(r + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            correct += (best == label) as usize;
        }
    }
    let n = ds.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains on a fixed train/validation pair; batch order depends on the seed and a
/// running epoch counter so successive phases see fresh shuffles.
pub struct Trainer<'d, T> {
    pub train: &'d Dataset,
    pub val: &'d Dataset,
    cfg: TrainConfig,
    opt: Optimizer<T>,
    seed: u64,
    epochs_run: usize,
}

impl<'d, T: Scalar> Trainer<'d, T> {
    pub fn new(train: &'d Dataset, val: &'d Dataset, cfg: TrainConfig, seed: u64) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data("training and validation sets must be non-empty".into()));
        }
        let opt = Optimizer::new(cfg.optimizer.clone())?;
        Ok(Self {
            train,
            val,
            cfg,
            opt,
            seed,
            epochs_run: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn reset_optimizer(&mut self) {
        self.opt = Optimizer::new(self.cfg.optimizer.clone()).expect("validated at construction");
    }

    pub fn epochs_run(&self) -> usize {
        self.epochs_run
    }

    /// One pass over the training set; returns (mean train loss, training FLOPs).
    pub fn epoch(&mut self, net: &mut MaskedNetwork<T>, lr: f64) -> Result<(f64, f64)> {
        let batches = epoch_batches(self.train.len(), self.cfg.optimizer.batch_size, self.seed, self.epochs_run);
        let mut flip_rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(0x5eed) ^ self.epochs_run as u64);
        let mut total = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let (x, y) = self
                .train
                .batch::<T>(idx, if self.cfg.flip { Some(&mut flip_rng) } else { None })?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let bound = net.bind(&mut tape, xv, Mode::Train, false)?;
            let loss = tape.softmax_cross_entropy(bound.output, &y)?;
            let lv = tape.value(loss).item()?.as_f64();
            if !lv.is_finite() {
                return Err(Error::Divergence(format!(
                    "training loss is {lv} at epoch {} batch {b} (density {:.4}, lr {lr})",
                    self.epochs_run,
                    net.density()
                )));
            }
            total += lv * idx.len() as f64;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Option<Tensor<T>>> = bound.param_vars().into_iter().map(|v| grads.take(v)).collect();
            net.update_running_stats(&tape, &bound, self.cfg.bn_momentum);
            self.opt.step(net, &g, lr)?;
        }
        net.check_finite()?;
        self.epochs_run += 1;
        let flops = flops_estimate(net, self.train.len(), Phase::Train);
        Ok((total / self.train.len() as f64, flops))
    }

    pub fn evaluate(&self, net: &MaskedNetwork<T>) -> Result<(f64, f64)> {
        evaluate(net, self.val, self.cfg.eval_batch)
    }

    /// Rough training under `policy` at the base learning rate.
    pub fn rough(
        &mut self,
        net: &mut MaskedNetwork<T>,
        policy: &RoughTrainPolicy,
        on_epoch: &mut dyn FnMut(&EpochStats) -> Result<()>,
    ) -> Result<PhaseOutcome> {
        policy.validate()?;
        let mut tracker = match *policy {
            RoughTrainPolicy::Adaptive { patience, .. } => Some(PatienceTracker::new(patience)),
            RoughTrainPolicy::Fixed { .. } => None,
        };
        let lr = self.cfg.optimizer.lr;
        self.run_epochs(net, policy.max_epochs(), |_, _| lr, &mut tracker, on_epoch)
    }

    /// Full-budget training with the configured schedule.
    pub fn extensive(
        &mut self,
        net: &mut MaskedNetwork<T>,
        epochs: usize,
        on_epoch: &mut dyn FnMut(&EpochStats) -> Result<()>,
    ) -> Result<PhaseOutcome> {
        let opt = self.cfg.optimizer.clone();
        self.run_epochs(net, epochs, |e, n| opt.lr_at(e, n), &mut None, on_epoch)
    }

    fn run_epochs(
        &mut self,
        net: &mut MaskedNetwork<T>,
        max_epochs: usize,
        lr: impl Fn(usize, usize) -> f64,
        tracker: &mut Option<PatienceTracker>,
        on_epoch: &mut dyn FnMut(&EpochStats) -> Result<()>,
    ) -> Result<PhaseOutcome> {
        let mut out = PhaseOutcome {
            epochs: 0,
            train_loss: f64::NAN,
            val_loss: f64::NAN,
            val_acc: 0.0,
            flops: 0.0,
        };
        for e in 0..max_epochs {
            let (train_loss, flops) = self.epoch(net, lr(e, max_epochs))?;
            let (val_loss, val_acc) = self.evaluate(net)?;
            out.epochs += 1;
            out.train_loss = train_loss;
            out.val_loss = val_loss;
            out.val_acc = val_acc;
            out.flops += flops;
            on_epoch(&EpochStats {
                epoch: e,
                density: net.density(),
                train_loss,
                val_loss,
                val_acc,
                flops,
            })?;
            if tracker.as_mut().is_some_and(|t| t.observe(val_loss)) {
                break;
            }
        }
        Ok(out)
    }
}
