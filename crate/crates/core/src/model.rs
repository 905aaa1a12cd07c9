//! Full translation model: backbone, routing, holistic context and output
//! layer, plus the training losses built on top of a forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, Dropout, LayerNorm, Linear, SourceEncoding};
use crate::config::{LossConfig, ModelConfig};
use crate::data::ParallelBatch;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::losses::{bca_loss, bow_loss, nll_loss, LossBundle};
use crate::params::{Init, ParamId, ParamStore};
use crate::real::Real;
use crate::routing::{RouteOptions, Router, RoutingOutput};

/// Layers that only exist when routing is enabled.
#[derive(Clone, Debug)]
struct ContextHeads {
    inner: Linear,
    outer: Linear,
    bow_past: ParamId,
    bow_future: ParamId,
    bca_past: ParamId,
    bca_future: ParamId,
}

#[derive(Clone, Debug)]
enum Output {
    Linear(Linear),
    Tied { bias: ParamId },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub router: Option<Router>,
    heads: Option<ContextHeads>,
    norm: Option<LayerNorm>,
    output: Output,
}

/// Everything produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<F> {
    pub src: SourceEncoding,
    /// Decoder states before routing, `[B, T, d]`.
    pub z: Var,
    pub routing: Option<RoutingOutput<F>>,
    /// Concatenated past capsules, `[B, T, per_category * dc]`.
    pub past: Option<Var>,
    pub future: Option<Var>,
    /// Holistic context `o`, `[B, T, d]`.
    pub context: Var,
    pub logits: Var,
}

impl Model {
    /// Builds the model and a freshly initialized parameter store.
    pub fn build<F: Real>(config: ModelConfig, seed: u64) -> Result<(Model, ParamStore<F>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::register(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    pub fn register<F: Real, R: Rng>(config: ModelConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<Model> {
        config.validate()?;
        let d = config.d_model;
        let backbone = Backbone::register(&config, store, rng)?;
        let (router, heads) = match config.routing {
            Some(rc) => {
                let router = Router::register(store, rc, d, rng)?;
                let agg = rc.per_category * rc.capsule_dim;
                let heads = ContextHeads {
                    inner: Linear::register(store, "context.inner", d + 2 * agg, config.d_ff, true, rng)?,
                    outer: Linear::register(store, "context.outer", config.d_ff, d, true, rng)?,
                    bow_past: store.init("bow.past", &[agg, d], Init::Xavier, rng)?,
                    bow_future: store.init("bow.future", &[agg, d], Init::Xavier, rng)?,
                    bca_past: store.init("bca.past", &[d, agg], Init::Xavier, rng)?,
                    bca_future: store.init("bca.future", &[d, agg], Init::Xavier, rng)?,
                };
                (Some(router), Some(heads))
            }
            None => (None, None),
        };
        let norm = if config.norm_after_routing {
            Some(LayerNorm::register(store, "context.norm", d, rng)?)
        } else {
            None
        };
        let output = if config.tie_output {
            Output::Tied {
                bias: store.init("output.bias", &[config.tgt_vocab], Init::Zeros, rng)?,
            }
        } else {
            Output::Linear(Linear::register(store, "output", d, config.tgt_vocab, true, rng)?)
        };
        Ok(Model {
            config,
            backbone,
            router,
            heads,
            norm,
            output,
        })
    }

    /// Teacher-forced forward pass over a batch.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        batch: &ParallelBatch,
        dropout: &mut Option<Dropout>,
        opts: RouteOptions,
    ) -> Result<ForwardOutput<F>> {
        let src = self
            .backbone
            .encode(g, &batch.src_ids, &batch.src_mask, batch.batch, batch.src_len, dropout)?;
        let z = self
            .backbone
            .decode_states(g, &batch.tgt_in, &batch.tgt_mask, batch.tgt_len, &src, dropout)?;
        self.head(g, src, z, opts)
    }

    /// Routing, holistic context and output distribution for decoder states
    /// `z [B, T, d]`.
    pub fn head<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        src: SourceEncoding,
        z: Var,
        opts: RouteOptions,
    ) -> Result<ForwardOutput<F>> {
        let (routing, past, future, mut context) = match (&self.router, &self.heads) {
            (Some(router), Some(heads)) => {
                let out = router.route(g, src.h, &src.mask, z, opts)?;
                let past = self.aggregate(g, out.capsules, router.cfg.past())?;
                let future = self.aggregate(g, out.capsules, router.cfg.future())?;
                let x = g.concat(&[z, past, future], 2)?;
                let y = heads.inner.forward(g, x)?;
                let y = g.tanh(y)?;
                let y = heads.outer.forward(g, y)?;
                let o = g.add(y, z)?;
                (Some(out), Some(past), Some(future), o)
            }
            _ => (None, None, None, z),
        };
        if let Some(norm) = &self.norm {
            context = norm.forward(g, context)?;
        }
        let logits = match &self.output {
            Output::Linear(l) => l.forward(g, context)?,
            Output::Tied { bias } => {
                let e = g.param(self.backbone.tgt_embed);
                let s = g.matmul_t(context, e, true)?;
                let b = g.param(*bias);
                g.add(s, b)?
            }
        };
        Ok(ForwardOutput {
            src,
            z,
            routing,
            past,
            future,
            context,
            logits,
        })
    }

    /// Capsules in `range` flattened into `[B, T, len * dc]`.
    fn aggregate<F: Real>(&self, g: &mut Graph<'_, F>, capsules: Var, range: core::ops::Range<usize>) -> Result<Var> {
        let s = g.shape(capsules).to_vec();
        let part = g.slice(capsules, 2, range.start, range.len())?;
        g.reshape(part, &[s[0], s[1], range.len() * s[3]])
    }

    /// Log-probabilities `[B, T, V]` of the past and future bag-of-words
    /// heads, or `None` without routing.
    pub fn bow_log_probs<F: Real>(&self, g: &mut Graph<'_, F>, fwd: &ForwardOutput<F>) -> Result<Option<(Var, Var)>> {
        let (Some(heads), Some(past), Some(future)) = (&self.heads, fwd.past, fwd.future) else {
            return Ok(None);
        };
        let e = g.param(self.backbone.tgt_embed);
        let mut out = [past; 2];
        for (slot, (agg, w)) in out.iter_mut().zip([(past, heads.bow_past), (future, heads.bow_future)]) {
            let w = g.param(w);
            let q = g.matmul(agg, w)?;
            let s = g.matmul_t(q, e, true)?;
            *slot = g.log_softmax(s)?;
        }
        Ok(Some((out[0], out[1])))
    }

    /// Builds the training objective. Components with zero weight are still
    /// reported but are left out of the returned total.
    pub fn loss<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        fwd: &ForwardOutput<F>,
        batch: &ParallelBatch,
        cfg: &LossConfig,
    ) -> Result<(Var, LossBundle)> {
        cfg.validate()?;
        let nll = nll_loss(g, fwd.logits, &batch.tgt_out, &batch.tgt_mask, cfg.label_smoothing)?;
        let mut total = nll;
        let (mut bow_v, mut bca_v) = (0.0, 0.0);
        if let Some((past_lp, future_lp)) = self.bow_log_probs(g, fwd)? {
            let bow = bow_loss(
                g,
                past_lp,
                future_lp,
                &batch.tgt_out,
                &batch.tgt_mask,
                batch.batch,
                batch.tgt_len,
                cfg.strict_preceding,
            )?;
            bow_v = g.value(bow).data()[0].as_f64();
            if cfg.lambda_bow > 0.0 {
                let t = g.scale(bow, cfg.lambda_bow)?;
                total = g.add(total, t)?;
            }
        }
        if let (Some(heads), Some(past), Some(future)) = (&self.heads, fwd.past, fwd.future) {
            let wp = g.param(heads.bca_past);
            let wf = g.param(heads.bca_future);
            let bca = bca_loss(g, past, future, fwd.z, wp, wf, &batch.tgt_mask, batch.batch, batch.tgt_len)?;
            bca_v = g.value(bca).data()[0].as_f64();
            if cfg.lambda_bca > 0.0 {
                let t = g.scale(bca, cfg.lambda_bca)?;
                total = g.add(total, t)?;
            }
        }
        let nll_v = g.value(nll).data()[0].as_f64();
        let bundle = LossBundle::combine(nll_v, bow_v, bca_v, cfg.lambda_bow, cfg.lambda_bca)?;
        Ok((total, bundle))
    }
}
