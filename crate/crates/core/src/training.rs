//! Loss, SGD with momentum, the step learning-rate schedule and the
//! training and evaluation loops.

use dbswin_tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{confusion, ConfusionCounts, MetricReport};
use crate::model::DbSwin;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 2e-4,
            momentum: 0.9,
            weight_decay: 2e-4,
            batch_size: 4,
            epochs: 100,
            decay_every: 20,
            decay_factor: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.decay_every == 0 {
            return bad("batch size, epochs and decay interval must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad("decay factor must lie in (0, 1)");
        }
        Ok(())
    }
}

/// `lr0 · decay_factor^⌊epoch / decay_every⌋`, rounded to 15 significant
/// digits so decimal schedules come out exact.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.decay_every) as i32;
    let lr = cfg.lr0 * cfg.decay_factor.powi(k);
    format!("{lr:.14e}").parse().expect("formatted float")
}

/// One SGD update: `g' = grad + wd·param; buf = momentum·buf + g';
/// param −= lr·buf`.
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    buf: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != buf.len() {
        return Err(Error::Config(format!(
            "sgd_step: param {}, grad {} and buffer {} lengths differ",
            param.len(),
            grad.len(),
            buf.len()
        )));
    }
    for ((p, &g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
        let g = g + weight_decay * *p;
        *b = momentum * *b + g;
        *p -= lr * *b;
    }
    Ok(())
}

/// Mean binary cross-entropy of one sample, recorded on `tape`.
pub fn sample_loss(tape: &mut Tape, model: &DbSwin, sample: &Sample) -> Result<dbswin_tensor::Var> {
    let logits = model.forward(tape, &sample.image_tensor())?;
    Ok(tape.bce_with_logits(logits, &sample.mask_tensor())?)
}

/// Logits `[1, H, W]` for one image.
pub fn infer(model: &DbSwin, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let y = model.forward(&mut tape, image)?;
    Ok(tape.value(y).clone())
}

/// Pools pixel counts over every sample before any ratio is taken.
pub fn evaluate(model: &DbSwin, samples: &[Sample]) -> Result<ConfusionCounts> {
    samples
        .iter()
        .map(|s| confusion(&infer(model, &s.image_tensor())?, &s.mask_tensor()))
        .sum()
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<MetricReport>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,val_precision,val_recall,val_f1,val_iou";

    pub fn csv_row(&self) -> String {
        let val = self.val.map_or_else(|| ",,,".to_string(), |m| m.csv_row());
        format!("{},{:e},{:.6},{val}", self.epoch, self.lr, self.train_loss)
    }
}

/// Model plus optimizer state; everything needed to resume bitwise.
pub struct Trainer {
    pub model: DbSwin,
    pub cfg: TrainConfig,
    momentum: Vec<Vec<f64>>,
    epoch: usize,
    rng: Xoshiro256StarStar,
    order_hash: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Trainer {
    pub fn new(model: DbSwin, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let momentum = model
            .params()
            .iter()
            .map(|(_, p)| vec![0.0; p.value().numel()])
            .collect();
        let rng = Xoshiro256StarStar::seed_from_u64(cfg.seed);
        Ok(Trainer {
            model,
            cfg,
            momentum,
            epoch: 0,
            rng,
            order_hash: FNV_OFFSET,
        })
    }

    /// Rebuilds a trainer mid-run from saved optimizer state.
    pub fn resume(
        model: DbSwin,
        cfg: TrainConfig,
        momentum: Vec<Vec<f64>>,
        epoch: usize,
        rng: Xoshiro256StarStar,
    ) -> Result<Self> {
        let mut t = Trainer::new(model, cfg)?;
        let sizes: Vec<usize> = t.momentum.iter().map(Vec::len).collect();
        if momentum.iter().map(Vec::len).ne(sizes.iter().copied()) {
            return Err(Error::Checkpoint(
                "momentum buffers do not match the model parameters".into(),
            ));
        }
        t.momentum = momentum;
        t.epoch = epoch;
        t.rng = rng;
        Ok(t)
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn momentum(&self) -> &[Vec<f64>] {
        &self.momentum
    }

    pub fn rng(&self) -> &Xoshiro256StarStar {
        &self.rng
    }

    /// FNV-1a hash of every sample order used so far.
    pub fn order_hash(&self) -> u64 {
        self.order_hash
    }

    /// Averages per-sample gradients over `batch` and takes one SGD step.
    /// Returns the summed loss of the batch.
    pub fn step(&mut self, samples: &[Sample], batch: &[usize], lr: f64, shuffle_seed: u64) -> Result<f64> {
        self.model.params_mut().zero_grads();
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            let mut tape = Tape::new();
            let loss = sample_loss(&mut tape, &self.model, &samples[i])?;
            let value = tape.value(loss).item().expect("scalar loss");
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    epoch: self.epoch,
                    batch: batch[0],
                    seed: shuffle_seed,
                    samples: batch.to_vec(),
                });
            }
            total += value;
            let grads = tape.backward(loss)?;
            self.model.params_mut().accumulate(&grads, scale);
        }
        let (momentum, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        let bufs = &mut self.momentum;
        let mut result = Ok(());
        self.model.params_mut().for_each_mut(|id, value, grad, decays| {
            if result.is_ok() {
                let wd = if decays { wd } else { 0.0 };
                result = sgd_step(value, grad, &mut bufs[id.index()], lr, momentum, wd);
            }
        });
        result.map(|_| total)
    }

    /// One pass over `samples` in a freshly shuffled order; returns the
    /// mean per-sample loss.
    pub fn train_epoch(&mut self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let lr = lr_at(self.epoch, &self.cfg);
        let shuffle_seed = self.rng.next_u64();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut Xoshiro256StarStar::seed_from_u64(shuffle_seed));
        for &i in &order {
            for b in (i as u64).to_le_bytes() {
                self.order_hash = (self.order_hash ^ u64::from(b)).wrapping_mul(FNV_PRIME);
            }
        }
        let mut total = 0.0;
        for (k, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            total += self.step(samples, batch, lr, shuffle_seed).map_err(|e| match e {
                Error::NonFinite {
                    epoch, seed, samples, ..
                } => Error::NonFinite {
                    epoch,
                    batch: k,
                    seed,
                    samples,
                },
                e => e,
            })?;
        }
        self.epoch += 1;
        Ok(total / samples.len() as f64)
    }

    /// Trains for the configured number of epochs (from the current epoch),
    /// reporting each log row to `on_epoch`.
    pub fn fit(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.cfg.epochs {
            let lr = lr_at(self.epoch, &self.cfg);
            let loss = self.train_epoch(train)?;
            let val = if val.is_empty() {
                None
            } else {
                Some(evaluate(&self.model, val)?.report())
            };
            let log = EpochLog {
                epoch: self.epoch,
                lr,
                train_loss: loss,
                val,
            };
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}
