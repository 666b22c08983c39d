//! Rate-distortion training loop.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::optim::{clip_grad_norm, Adam};
use crate::tensor::Real;

/// Window of the trailing mean used to judge loss curves.
pub const SMOOTHING_WINDOW: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub bpp: f64,
    pub mse: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} loss={:.6} bpp={:.6} mse={:.4} lr={:e} grad_norm={:.4}",
            self.step, self.loss, self.bpp, self.mse, self.lr, self.grad_norm
        )
    }
}

pub struct Trainer<'c, T: Real> {
    pub model: Model<T>,
    pub config: TrainConfig,
    corpus: &'c Corpus,
    optimizer: Adam<T>,
    rng: ChaCha8Rng,
    step: usize,
}

impl<'c, T: Real> Trainer<'c, T> {
    pub fn new(model: Model<T>, corpus: &'c Corpus, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if corpus.len() < config.batch_size {
            return Err(Error::InvalidArgument(format!(
                "corpus has {} images, fewer than the batch size {}",
                corpus.len(),
                config.batch_size
            )));
        }
        let optimizer = Adam::new(&model.store, config.lr);
        let rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x7261_696e);
        Ok(Trainer { model, config, corpus, optimizer, rng, step: 0 })
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        if self.config.lr_decay_step > 0 && step > self.config.lr_decay_step {
            self.config.lr * 0.1
        } else {
            self.config.lr
        }
    }

    /// One optimizer step on a random batch. Steps are numbered from 1.
    pub fn step(&mut self) -> Result<StepRecord> {
        self.step += 1;
        let indices = sample(&mut self.rng, self.corpus.len(), self.config.batch_size).into_vec();
        let x = self.corpus.batch::<T>(&indices)?;
        let lr = self.learning_rate(self.step);
        let (record, grads) = {
            let mut g = Graph::new(&self.model.store);
            let xv = g.input(x);
            let out = self.model.forward(&mut g, xv, Some(&mut self.rng))?;
            let loss = g.value(out.loss).data()[0].f64();
            if !loss.is_finite() {
                let culprit = g.first_non_finite().unwrap_or_else(|| "loss".into());
                return Err(Error::NonFinite(format!("step {}: loss is {loss}, first non-finite tensor: {culprit}", self.step)));
            }
            let bpp = g.value(out.bpp).data()[0].f64();
            let mse = g.value(out.mse).data()[0].f64();
            let grads = g.backward(out.loss)?;
            (StepRecord { step: self.step, loss, bpp, mse, lr, grad_norm: 0.0 }, grads)
        };
        self.model.store.zero_grads();
        grads.store_into(&mut self.model.store);
        let grad_norm = clip_grad_norm(&mut self.model.store, self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("step {}: gradient norm is {grad_norm}", self.step)));
        }
        self.optimizer.lr = lr;
        self.optimizer.step(&mut self.model.store);
        Ok(StepRecord { grad_norm, ..record })
    }

    /// Runs the configured number of steps, passing every `log_every`-th
    /// record (and the last) to `log`.
    pub fn run(&mut self, mut log: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut records = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            let r = self.step()?;
            if r.step % self.config.log_every == 0 || r.step == self.config.steps {
                log(&r);
            }
            records.push(r);
        }
        Ok(records)
    }
}

/// Trains `model` on `corpus` and returns the trained model with its records.
pub fn train<T: Real>(
    model: Model<T>,
    corpus: &Corpus,
    config: &TrainConfig,
    log: impl FnMut(&StepRecord),
) -> Result<(Model<T>, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(model, corpus, config.clone())?;
    let records = trainer.run(log)?;
    Ok((trainer.model, records))
}

/// Trailing mean over `window` values (shorter at the start).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Means of the first and last `window` losses.
pub fn loss_endpoints(records: &[StepRecord], window: usize) -> Option<(f64, f64)> {
    if records.len() < window || window == 0 {
        return None;
    }
    let mean = |r: &[StepRecord]| r.iter().map(|r| r.loss).sum::<f64>() / r.len() as f64;
    Some((mean(&records[..window]), mean(&records[records.len() - window..])))
}
