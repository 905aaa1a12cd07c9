//! Central finite differences against the analytic gradient of the training
//! objective, in f64.

use gdr_core::data::{Example, ParallelBatch};
use gdr_core::losses::{bca_loss, bow_loss, nll_loss};
use gdr_core::routing::RouteOptions;
use gdr_core::{Graph, LossConfig, Model, ModelConfig, ParamStore, RoutingConfig, Tensor};

pub const STEP: f64 = 1e-5;

pub struct ParamReport {
    pub name: String,
    pub rel_err: f64,
    pub max_abs_err: f64,
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        src_vocab: 9,
        tgt_vocab: 8,
        d_model: 8,
        layers: 1,
        heads: 2,
        d_ff: 12,
        dropout: 0.0,
        routing: Some(RoutingConfig {
            iterations: 3,
            capsule_dim: 4,
            per_category: 2,
            redundant: 2,
        }),
        norm_after_routing: true,
        tie_output: false,
    }
}

pub fn two_pair_batch() -> ParallelBatch {
    let a = Example {
        src: vec![4, 5, 6, 7, 2],
        tgt: vec![5, 6, 4, 2],
    };
    let b = Example {
        src: vec![8, 4, 2],
        tgt: vec![7, 5, 6, 7, 2],
    };
    ParallelBatch::from_examples(&[&a, &b]).unwrap()
}

/// The objective with every stop-gradient honoured: the decoder states that
/// feed the agreement targets are frozen at `frozen_z`.
fn objective(model: &Model, store: &ParamStore<f64>, batch: &ParallelBatch, cfg: &LossConfig, frozen_z: &Tensor<f64>) -> f64 {
    let mut g = Graph::with_params(store);
    let fwd = model.forward(&mut g, batch, &mut None, RouteOptions::default()).unwrap();
    let mut total = nll_loss(&mut g, fwd.logits, &batch.tgt_out, &batch.tgt_mask, cfg.label_smoothing).unwrap();
    if let Some((p, f)) = model.bow_log_probs(&mut g, &fwd).unwrap() {
        let bow = bow_loss(&mut g, p, f, &batch.tgt_out, &batch.tgt_mask, batch.batch, batch.tgt_len, cfg.strict_preceding)
            .unwrap();
        let bow = g.scale(bow, cfg.lambda_bow).unwrap();
        total = g.add(total, bow).unwrap();
        let z = g.constant(frozen_z.clone());
        let wp = g.param(store.id("bca.past").unwrap());
        let wf = g.param(store.id("bca.future").unwrap());
        let (past, future) = (fwd.past.unwrap(), fwd.future.unwrap());
        let bca = bca_loss(&mut g, past, future, z, wp, wf, &batch.tgt_mask, batch.batch, batch.tgt_len).unwrap();
        let bca = g.scale(bca, cfg.lambda_bca).unwrap();
        total = g.add(total, bca).unwrap();
    }
    g.value(total).data()[0]
}

/// Compares every parameter's analytic gradient of the total loss with
/// central differences. The relative error of a tensor is
/// `|a - n| / max(|a|, |n|)` in the Euclidean norm.
pub fn check_model(cfg: ModelConfig, loss: LossConfig, seed: u64) -> Vec<ParamReport> {
    let (model, mut store) = Model::build::<f64>(cfg, seed).unwrap();
    let batch = two_pair_batch();

    let (analytic, frozen_z, reported) = {
        let mut g = Graph::with_params(&store);
        let fwd = model.forward(&mut g, &batch, &mut None, RouteOptions::default()).unwrap();
        let (total, _) = model.loss(&mut g, &fwd, &batch, &loss).unwrap();
        let grads = g.backward(total).unwrap();
        let analytic: Vec<Tensor<f64>> = store.iter().map(|p| grads.param(store.id(&p.name).unwrap())).collect();
        (analytic, g.value(fwd.z).clone(), g.value(total).data()[0])
    };
    let base = objective(&model, &store, &batch, &loss, &frozen_z);
    assert!((base - reported).abs() < 1e-9 * reported.abs().max(1.0), "objective {base} vs loss {reported}");

    let mut out = Vec::new();
    for (k, grad) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.len());
        for e in 0..grad.len() {
            let orig = store.iter().nth(k).unwrap().value.data()[e];
            let set = |s: &mut ParamStore<f64>, v: f64| s.iter_mut().nth(k).unwrap().value.data_mut()[e] = v;
            set(&mut store, orig + STEP);
            let up = objective(&model, &store, &batch, &loss, &frozen_z);
            set(&mut store, orig - STEP);
            let down = objective(&model, &store, &batch, &loss, &frozen_z);
            set(&mut store, orig);
            numeric.push((up - down) / (2.0 * STEP));
        }
        let (mut diff, mut na, mut nn, mut max_abs) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for (a, n) in grad.data().iter().zip(&numeric) {
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
            max_abs = max_abs.max((a - n).abs());
        }
        let scale = na.sqrt().max(nn.sqrt());
        let rel_err = if scale < 1e-10 { diff.sqrt() } else { diff.sqrt() / scale };
        out.push(ParamReport {
            name: store.iter().nth(k).unwrap().name.clone(),
            rel_err,
            max_abs_err: max_abs,
        });
    }
    out
}
