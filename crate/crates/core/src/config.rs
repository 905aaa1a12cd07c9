//! Model, loss and training hyperparameters.

use alloc::format;

use crate::error::{Error, Result};

/// Shape of the guided routing layer.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoutingConfig {
    /// Routing iterations per decoding step.
    pub iterations: usize,
    /// Capsule dimension.
    pub capsule_dim: usize,
    /// Capsules in each of the past and future groups.
    pub per_category: usize,
    /// Redundant capsules absorbing untranslatable source content.
    pub redundant: usize,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            iterations: 3,
            capsule_dim: 32,
            per_category: 2,
            redundant: 2,
        }
    }
}

impl RoutingConfig {
    /// Total number of output capsules, ordered past, future, redundant.
    pub fn num_capsules(&self) -> usize {
        2 * self.per_category + self.redundant
    }

    pub fn past(&self) -> core::ops::Range<usize> {
        0..self.per_category
    }

    pub fn future(&self) -> core::ops::Range<usize> {
        self.per_category..2 * self.per_category
    }

    pub fn redundant_range(&self) -> core::ops::Range<usize> {
        2 * self.per_category..self.num_capsules()
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("routing iterations must be at least 1".into()));
        }
        if self.capsule_dim == 0 || self.per_category == 0 {
            return Err(Error::Config("capsule dimension and capsules per category must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// `None` builds the plain encoder-decoder baseline.
    pub routing: Option<RoutingConfig>,
    /// Layer-normalize the holistic context after its residual.
    pub norm_after_routing: bool,
    /// Reuse the target embedding table as the output projection.
    pub tie_output: bool,
}

impl ModelConfig {
    pub fn new(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 128,
            dropout: 0.1,
            routing: Some(RoutingConfig::default()),
            norm_after_routing: true,
            tie_output: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.src_vocab <= crate::data::NUM_RESERVED || self.tgt_vocab <= crate::data::NUM_RESERVED {
            return Err(Error::Config("vocabularies must contain more than the reserved tokens".into()));
        }
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dimension {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Some(r) = &self.routing {
            r.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossConfig {
    pub lambda_bow: f64,
    pub lambda_bca: f64,
    pub label_smoothing: f64,
    /// Use `y_{<t}` instead of `y_{<=t}` for the preceding bag of words.
    pub strict_preceding: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_bow: 1.0,
            lambda_bca: 1.0,
            label_smoothing: 0.0,
            strict_preceding: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_bow < 0.0 || self.lambda_bca < 0.0 || !self.lambda_bow.is_finite() || !self.lambda_bca.is_finite() {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub steps: usize,
    /// Upper bound on `batch rows * longest sequence` per batch.
    pub batch_tokens: usize,
    pub warmup: usize,
    /// Learning rate reached at the end of warmup; inverse square-root decay after.
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 4000,
            batch_tokens: 512,
            warmup: 400,
            peak_lr: 2e-3,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            clip_norm: Some(5.0),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch tokens must be positive".into()));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        let step = step.max(1) as f64;
        let warmup = self.warmup.max(1) as f64;
        if step <= warmup {
            self.peak_lr * step / warmup
        } else {
            self.peak_lr * crate::real::fmath::sqrt(warmup / step)
        }
    }
}
