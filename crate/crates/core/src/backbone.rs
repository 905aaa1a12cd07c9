//! Self-attention encoder-decoder producing source encodings `h` and the
//! pre-routing decoder states `z`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::PAD;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::real::{fmath, Real};
use crate::tensor::Tensor;

/// Additive score for excluded attention keys; `exp` of it underflows to zero.
const MASKED: f64 = -1e9;

/// Dropout state for a training forward pass.
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn apply<F: Real>(this: &mut Option<Dropout>, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let Some(d) = this.as_mut().filter(|d| d.rate > 0.0) else {
            return Ok(x);
        };
        let keep = 1.0 - d.rate;
        let scale = F::of(1.0 / keep);
        let shape = g.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if d.rng.random_bool(keep) { scale } else { F::zero() });
        let m = g.constant(mask);
        g.mul(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn register<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Linear> {
        let weight = store.init(&format!("{name}.weight"), &[inputs, outputs], Init::Xavier, rng)?;
        let bias = if bias {
            Some(store.init(&format!("{name}.bias"), &[outputs], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn register<F: Real, R: Rng>(store: &mut ParamStore<F>, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.init(&format!("{name}.gain"), &[dim], Init::Ones, rng)?,
            bias: store.init(&format!("{name}.bias"), &[dim], Init::Zeros, rng)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    fn register<F: Real, R: Rng>(store: &mut ParamStore<F>, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(MultiHeadAttention {
            query: Linear::register(store, &format!("{name}.query"), d, d, true, rng)?,
            key: Linear::register(store, &format!("{name}.key"), d, d, true, rng)?,
            value: Linear::register(store, &format!("{name}.value"), d, d, true, rng)?,
            out: Linear::register(store, &format!("{name}.out"), d, d, true, rng)?,
            heads,
        })
    }

    /// `queries [B, Lq, d]` attend over `memory [B, Lk, d]`; `bias` broadcasts
    /// against the `[B, heads, Lq, Lk]` scores.
    fn forward<F: Real>(&self, g: &mut Graph<'_, F>, queries: Var, memory: Var, bias: Var) -> Result<Var> {
        let (b, lq, d) = dims3(g, queries)?;
        let lk = g.shape(memory)[1];
        let h = self.heads;
        let dh = d / h;
        let split = |g: &mut Graph<'_, F>, x: Var, l: usize| -> Result<Var> {
            let x = g.reshape(x, &[b, l, h, dh])?;
            g.permute(x, &[0, 2, 1, 3])
        };
        let q = self.query.forward(g, queries)?;
        let q = split(g, q, lq)?;
        let k = self.key.forward(g, memory)?;
        let k = split(g, k, lk)?;
        let v = self.value.forward(g, memory)?;
        let v = split(g, v, lk)?;
        let scores = g.matmul_t(q, k, true)?;
        let scores = g.scale(scores, 1.0 / fmath::sqrt(dh as f64))?;
        let scores = g.add(scores, bias)?;
        let weights = g.softmax(scores)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, lq, d])?;
        self.out.forward(g, ctx)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let y = self.inner.forward(g, x)?;
        let y = g.relu(y)?;
        self.outer.forward(g, y)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

/// Encoded source sentences `h [batch, len, d]`; padded rows are zero.
#[derive(Clone, Debug)]
pub struct SourceEncoding {
    pub h: Var,
    pub batch: usize,
    pub len: usize,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub src_embed: ParamId,
    pub tgt_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    d_model: usize,
    src_vocab: usize,
    tgt_vocab: usize,
    dropout: f64,
}

fn dims3<F: Real>(g: &Graph<'_, F>, x: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [a, b, c] => Ok((a, b, c)),
        ref s => Err(Error::shape("rank-3 input", s, &[0, 0, 0])),
    }
}

/// Sinusoidal position table `[len, d]`.
pub fn positions<F: Real>(len: usize, d: usize) -> Tensor<F> {
    Tensor::from_fn(&[len, d], |idx| {
        let (pos, j) = (idx / d, idx % d);
        let freq = 1.0 / fmath::powf(10000.0, (2 * (j / 2)) as f64 / d as f64);
        let angle = pos as f64 * freq;
        F::of(if j % 2 == 0 { fmath::sin(angle) } else { fmath::cos(angle) })
    })
}

fn key_bias<F: Real>(mask: &[bool], batch: usize, len: usize) -> Tensor<F> {
    Tensor::from_fn(&[batch, 1, 1, len], |i| if mask[i] { F::zero() } else { F::of(MASKED) })
}

fn causal_bias<F: Real>(len: usize) -> Tensor<F> {
    Tensor::from_fn(&[1, 1, len, len], |i| if i % len <= i / len { F::zero() } else { F::of(MASKED) })
}

fn check_ids(ids: &[usize], mask: &[bool], vocab: usize, side: &str) -> Result<Vec<usize>> {
    ids.iter()
        .zip(mask)
        .map(|(&id, &m)| {
            if !m {
                Ok(PAD)
            } else if id >= vocab {
                Err(Error::Input(format!("{side} token id {id} outside vocabulary of {vocab}")))
            } else {
                Ok(id)
            }
        })
        .collect()
}

impl Backbone {
    pub fn register<F: Real, R: Rng>(cfg: &ModelConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        let src_embed = store.init("encoder.embed", &[cfg.src_vocab, d], Init::Xavier, rng)?;
        let tgt_embed = store.init("decoder.embed", &[cfg.tgt_vocab, d], Init::Xavier, rng)?;
        let ff = |store: &mut ParamStore<F>, name: String, rng: &mut R| -> Result<FeedForward> {
            Ok(FeedForward {
                inner: Linear::register(store, &format!("{name}.inner"), d, cfg.d_ff, true, rng)?,
                outer: Linear::register(store, &format!("{name}.outer"), cfg.d_ff, d, true, rng)?,
            })
        };
        let mut encoder = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("encoder.layers.{l}");
            encoder.push(EncoderLayer {
                attn_norm: LayerNorm::register(store, &format!("{p}.attn_norm"), d, rng)?,
                attn: MultiHeadAttention::register(store, &format!("{p}.attn"), d, cfg.heads, rng)?,
                ff_norm: LayerNorm::register(store, &format!("{p}.ff_norm"), d, rng)?,
                ff: ff(store, format!("{p}.ff"), rng)?,
            });
        }
        let encoder_norm = LayerNorm::register(store, "encoder.norm", d, rng)?;
        let mut decoder = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("decoder.layers.{l}");
            decoder.push(DecoderLayer {
                self_norm: LayerNorm::register(store, &format!("{p}.self_norm"), d, rng)?,
                self_attn: MultiHeadAttention::register(store, &format!("{p}.self_attn"), d, cfg.heads, rng)?,
                cross_norm: LayerNorm::register(store, &format!("{p}.cross_norm"), d, rng)?,
                cross_attn: MultiHeadAttention::register(store, &format!("{p}.cross_attn"), d, cfg.heads, rng)?,
                ff_norm: LayerNorm::register(store, &format!("{p}.ff_norm"), d, rng)?,
                ff: ff(store, format!("{p}.ff"), rng)?,
            });
        }
        let decoder_norm = LayerNorm::register(store, "decoder.norm", d, rng)?;
        Ok(Backbone {
            src_embed,
            tgt_embed,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            d_model: d,
            src_vocab: cfg.src_vocab,
            tgt_vocab: cfg.tgt_vocab,
            dropout: cfg.dropout,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout
    }

    fn embed<F: Real>(&self, g: &mut Graph<'_, F>, table: ParamId, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        let d = self.d_model;
        let e = g.param(table);
        let x = g.gather(e, ids, &[batch, len])?;
        let x = g.scale(x, fmath::sqrt(d as f64))?;
        let pos = g.constant(positions(len, d));
        g.add(x, pos)
    }

    /// Runs the encoder stack over `[batch, len]` token ids.
    pub fn encode<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        ids: &[usize],
        mask: &[bool],
        batch: usize,
        len: usize,
        dropout: &mut Option<Dropout>,
    ) -> Result<SourceEncoding> {
        if len == 0 || batch == 0 || ids.len() != batch * len || mask.len() != ids.len() {
            return Err(Error::shape("encode", &[batch, len], &[ids.len(), mask.len()]));
        }
        for r in 0..batch {
            if !mask[r * len..(r + 1) * len].iter().any(|&m| m) {
                return Err(Error::Input(format!("source row {r} is empty after masking")));
            }
        }
        let ids = check_ids(ids, mask, self.src_vocab, "source")?;
        let mut x = self.embed(g, self.src_embed, &ids, batch, len)?;
        x = Dropout::apply(dropout, g, x)?;
        let bias = g.constant(key_bias(mask, batch, len));
        for layer in &self.encoder {
            let y = layer.attn_norm.forward(g, x)?;
            let y = layer.attn.forward(g, y, y, bias)?;
            let y = Dropout::apply(dropout, g, y)?;
            x = g.add(x, y)?;
            let y = layer.ff_norm.forward(g, x)?;
            let y = layer.ff.forward(g, y)?;
            let y = Dropout::apply(dropout, g, y)?;
            x = g.add(x, y)?;
        }
        let h = self.encoder_norm.forward(g, x)?;
        let keep = g.constant(Tensor::from_fn(&[batch, len, 1], |i| if mask[i] { F::one() } else { F::zero() }));
        let h = g.mul(h, keep)?;
        Ok(SourceEncoding {
            h,
            batch,
            len,
            mask: mask.to_vec(),
        })
    }

    /// Teacher-forced decoder states `z [batch, len, d]` for right-shifted
    /// target ids. Position `t` only sees inputs `<= t`.
    pub fn decode_states<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        tgt_in: &[usize],
        tgt_mask: &[bool],
        len: usize,
        src: &SourceEncoding,
        dropout: &mut Option<Dropout>,
    ) -> Result<Var> {
        let batch = src.batch;
        if len == 0 {
            return Err(Error::Input("empty target".into()));
        }
        if tgt_in.len() != batch * len || tgt_mask.len() != tgt_in.len() {
            return Err(Error::shape("decode_states", &[batch, len], &[tgt_in.len(), tgt_mask.len()]));
        }
        for r in 0..batch {
            if !src.mask[r * src.len..(r + 1) * src.len].iter().any(|&m| m) {
                return Err(Error::Input(format!("source row {r} has no unmasked position to attend to")));
            }
        }
        let ids = check_ids(tgt_in, tgt_mask, self.tgt_vocab, "target")?;
        let mut x = self.embed(g, self.tgt_embed, &ids, batch, len)?;
        x = Dropout::apply(dropout, g, x)?;
        let causal = g.constant(causal_bias(len));
        let cross = g.constant(key_bias(&src.mask, batch, src.len));
        for layer in &self.decoder {
            let y = layer.self_norm.forward(g, x)?;
            let y = layer.self_attn.forward(g, y, y, causal)?;
            let y = Dropout::apply(dropout, g, y)?;
            x = g.add(x, y)?;
            let y = layer.cross_norm.forward(g, x)?;
            let y = layer.cross_attn.forward(g, y, src.h, cross)?;
            let y = Dropout::apply(dropout, g, y)?;
            x = g.add(x, y)?;
            let y = layer.ff_norm.forward(g, x)?;
            let y = layer.ff.forward(g, y)?;
            let y = Dropout::apply(dropout, g, y)?;
            x = g.add(x, y)?;
        }
        self.decoder_norm.forward(g, x)
    }
}

/// Scaled dot-product attention of `queries [Lq, d]` over `keys [Lk, d]` and
/// `values [Lk, dv]`. Keys with `mask == false` get zero weight.
pub fn attention<F: Real>(g: &mut Graph<'_, F>, queries: Var, keys: Var, values: Var, mask: &[bool]) -> Result<Var> {
    let (qs, ks, vs) = (g.shape(queries).to_vec(), g.shape(keys).to_vec(), g.shape(values).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] || mask.len() != ks[0] {
        return Err(Error::shape("attention", &ks, &vs));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Input("attention over a fully masked key set".into()));
    }
    let scores = g.matmul_t(queries, keys, true)?;
    let scores = g.scale(scores, 1.0 / fmath::sqrt(qs[1] as f64))?;
    let bias = g.constant(Tensor::from_fn(&[1, ks[0]], |i| if mask[i] { F::zero() } else { F::of(MASKED) }));
    let scores = g.add(scores, bias)?;
    let weights = g.softmax(scores)?;
    g.matmul(weights, values)
}
