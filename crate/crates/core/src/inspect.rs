//! Per-step routing summaries for a single sentence pair.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::data::{Example, ParallelBatch, Vocab, EOS};
use crate::decode::greedy;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::params::ParamStore;
use crate::real::Real;
use crate::routing::{category_mass, RouteOptions};
use crate::tensor::Tensor;

pub const DUMP_VERSION: u32 = 1;

/// Routing of one decoding step.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRouting {
    pub step: usize,
    /// Target token at this step (teacher forcing).
    pub token: String,
    /// Most probable token under the model.
    pub predicted: String,
    /// `[past, future, redundant]` mass of every source position.
    pub category_mass: Vec<[f64; 3]>,
    /// The same masses after every routing round.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub iterations: Option<Vec<Vec<[f64; 3]>>>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoutingDump {
    pub version: u32,
    /// Source tokens including the closing `</s>`.
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub steps: Vec<StepRouting>,
}

/// Routes `source` against `target` (ids without EOS). Without a target the
/// greedy translation is used.
pub fn inspect_routing<F: Real>(
    model: &Model,
    store: &ParamStore<F>,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    source: &[usize],
    target: Option<&[usize]>,
    trace_iterations: bool,
) -> Result<RoutingDump> {
    let Some(router) = &model.router else {
        return Err(Error::Config("model was built without routing".into()));
    };
    let target: Vec<usize> = match target {
        Some(t) => t.to_vec(),
        None => greedy(model, store, &[source.to_vec()])?.remove(0).tokens,
    };
    let mut ex = Example {
        src: source.to_vec(),
        tgt: target.clone(),
    };
    ex.src.push(EOS);
    ex.tgt.push(EOS);
    let batch = ParallelBatch::from_examples(&[&ex])?;
    let mut g = Graph::with_params(store);
    let opts = RouteOptions {
        trace: trace_iterations,
        final_update: false,
    };
    let fwd = model.forward(&mut g, &batch, &mut None, opts)?;
    let routing = fwd.routing.as_ref().expect("routing output");
    let (steps, src_len) = (batch.tgt_len, batch.src_len);
    let per_step = |a: &Tensor<F>| -> Result<Vec<Vec<[f64; 3]>>> {
        let m = category_mass(a, &batch.src_mask, &router.cfg)?;
        Ok(m.chunks(src_len).map(<[[f64; 3]]>::to_vec).collect())
    };
    let masses = per_step(g.value(routing.assign))?;
    let rounds = match &routing.trace {
        Some(tr) => Some(tr.iter().map(|r| per_step(&r.assign)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let logits = g.value(fwd.logits);
    let v = logits.len() / steps;
    let mut out = Vec::with_capacity(steps);
    for (t, mass) in masses.into_iter().enumerate() {
        let row = &logits.data()[t * v..(t + 1) * v];
        let mut best = 0;
        for (i, x) in row.iter().enumerate() {
            if *x > row[best] {
                best = i;
            }
        }
        out.push(StepRouting {
            step: t,
            token: tgt_vocab.token(batch.tgt_out[t]).to_string(),
            predicted: tgt_vocab.token(best).to_string(),
            category_mass: mass,
            iterations: rounds.as_ref().map(|r| r.iter().map(|round| round[t].clone()).collect()),
        });
    }
    Ok(RoutingDump {
        version: DUMP_VERSION,
        source: batch.src_ids.iter().map(|&i| src_vocab.token(i).to_string()).collect(),
        target: target.iter().map(|&i| tgt_vocab.token(i).to_string()).collect(),
        steps: out,
    })
}
