use alloc::format;
use alloc::vec::Vec;

use super::data::Dataset;
use super::metrics::argmax;
use super::optim::{cosine_lr, AdamW};
use crate::error::{config_err, Result};
use crate::model::Model;
use crate::numerics::{DType, Graph, Real, Tensor};
use crate::rng::{self, ChaCha8Rng};

/// Stream of the training generator (shuffling, flips, drop path).
pub const TRAIN_STREAM: u64 = 0x7472_6169_6e;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Random left-right mirroring of training images.
    pub flip: bool,
    pub precision: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 32,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 2,
            seed: 0,
            flip: false,
            precision: DType::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(config_err("batch size must be positive"));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(config_err(format!(
                "warmup ({} epochs) must be shorter than training ({} epochs)",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(config_err("learning rate and weight decay must be non-negative"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch)
    }
}

/// Mean loss and accuracy over one epoch of training batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Model, optimiser and generator; everything needed to continue a run
/// exactly where it stopped.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub rng: ChaCha8Rng,
    pub cfg: TrainConfig,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(model.params(), cfg.weight_decay);
        Ok(Self {
            model,
            opt,
            rng: rng::stream(cfg.seed, TRAIN_STREAM),
            cfg,
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// Completed epochs for a dataset of `samples` images.
    pub fn epoch(&self, samples: usize) -> usize {
        (self.opt.step as usize) / self.cfg.steps_per_epoch(samples).max(1)
    }

    /// Learning rate of the next update.
    pub fn lr(&self, samples: usize) -> f64 {
        let spe = self.cfg.steps_per_epoch(samples);
        cosine_lr(
            self.opt.step as usize,
            self.cfg.epochs * spe,
            self.cfg.warmup_epochs * spe,
            self.cfg.lr,
        )
    }

    /// Forward, backward and one AdamW update. Returns the batch loss and
    /// the number of correct predictions.
    pub fn train_step(&mut self, images: &Tensor<T>, labels: &[usize], lr: f64) -> Result<(f64, usize)> {
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g, true);
        let x = g.constant(images.clone());
        let out = self.model.forward(&mut g, &vars, x, Some(&mut self.rng))?;
        let loss = g.cross_entropy(out.logits, labels)?;
        g.backward(loss)?;
        let logits = g.value(out.logits);
        let k = logits.shape()[1];
        let correct = logits
            .data()
            .chunks(k)
            .zip(labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        let loss_value = g.value(loss).data()[0].to_f64();
        let grads: Vec<Option<&[T]>> = vars.iter().map(|&v| g.grad(v)).collect();
        self.opt.update(self.model.params_mut(), &grads, lr)?;
        Ok((loss_value, correct))
    }

    /// Shuffled mini-batch order (and flip flags) for the next epoch.
    pub fn epoch_plan(&mut self, samples: usize) -> Vec<(Vec<usize>, Vec<bool>)> {
        let mut order: Vec<usize> = (0..samples).collect();
        rng::shuffle(&mut self.rng, &mut order);
        order
            .chunks(self.cfg.batch)
            .map(|chunk| {
                let flips = chunk
                    .iter()
                    .map(|_| self.cfg.flip && rng::uniform(&mut self.rng) < 0.5)
                    .collect();
                (chunk.to_vec(), flips)
            })
            .collect()
    }

    /// One pass over `data`. `on_step` sees `(step, loss)` after each update.
    pub fn run_epoch(&mut self, data: &Dataset, mut on_step: impl FnMut(u64, f64)) -> Result<EpochStats> {
        let epoch = self.epoch(data.len());
        let plan = self.epoch_plan(data.len());
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (indices, flips) in plan {
            let (x, labels) = data.batch::<T>(&indices, &flips);
            let lr = self.lr(data.len());
            let (loss, ok) = self.train_step(&x, &labels, lr)?;
            loss_sum += loss * indices.len() as f64;
            correct += ok;
            on_step(self.opt.step, loss);
        }
        let n = data.len().max(1) as f64;
        Ok(EpochStats {
            epoch,
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
        })
    }
}
