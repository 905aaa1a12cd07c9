//! Training loop over a batch stream.

use crate::backbone::Dropout;
use crate::config::{LossConfig, TrainConfig};
use crate::data::{Batcher, ParallelBatch};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::LossBundle;
use crate::model::Model;
use crate::optim::{clip_grad_norm, Adam};
use crate::params::ParamStore;
use crate::real::Real;
use crate::routing::RouteOptions;

/// Summary of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    #[cfg_attr(feature = "serde", serde(flatten))]
    pub loss: LossBundle,
    pub grad_norm: f64,
    pub tokens: usize,
}

pub struct Trainer<F: Real> {
    pub model: Model,
    pub store: ParamStore<F>,
    pub config: TrainConfig,
    pub loss: LossConfig,
    optimizer: Adam<F>,
    batcher: Batcher,
    step: usize,
}

/// Seed of the dropout masks used at `step`.
fn dropout_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

impl<F: Real> Trainer<F> {
    pub fn new(model: Model, store: ParamStore<F>, config: TrainConfig, loss: LossConfig, batcher: Batcher) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        let optimizer = Adam::new(&store, config.beta1, config.beta2, config.adam_eps);
        Ok(Trainer {
            model,
            store,
            config,
            loss,
            optimizer,
            batcher,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.batcher.epoch()
    }

    /// Loss and gradients of `batch` accumulated into the store, without an update.
    pub fn compute_gradients(&mut self, batch: &ParallelBatch, dropout: Option<Dropout>) -> Result<LossBundle> {
        self.store.zero_grad();
        let mut dropout = dropout;
        let grads = {
            let mut g = Graph::with_params(&self.store);
            let fwd = self.model.forward(&mut g, batch, &mut dropout, RouteOptions::default())?;
            let (total, bundle) = self.model.loss(&mut g, &fwd, batch, &self.loss)?;
            (g.backward(total)?, bundle)
        };
        self.store.accumulate(&grads.0);
        Ok(grads.1)
    }

    /// Draws the next batch and takes one optimizer step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.batcher.next_batch()?;
        let next = self.step + 1;
        let rate = self.model.backbone.dropout_rate();
        let dropout = (rate > 0.0).then(|| Dropout::new(rate, dropout_seed(self.config.seed, next)));
        let loss = self.compute_gradients(&batch, dropout)?;
        let grad_norm = match self.config.clip_norm {
            Some(max) => clip_grad_norm(&mut self.store, max),
            None => self.store.grad_norm(),
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient norm"));
        }
        let lr = self.config.learning_rate(next);
        self.optimizer.update(&mut self.store, lr);
        self.step = next;
        Ok(StepRecord {
            step: next,
            lr,
            loss,
            grad_norm,
            tokens: batch.num_tgt_tokens(),
        })
    }

    /// Runs until `config.steps` updates have been made, calling `log` after each.
    pub fn run(&mut self, mut log: impl FnMut(&StepRecord)) -> Result<()> {
        while self.step < self.config.steps {
            let rec = self.step()?;
            log(&rec);
        }
        Ok(())
    }
}
