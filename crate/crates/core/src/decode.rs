//! Greedy and beam-search decoding.
//!
//! The source side is encoded once. Each decoding step reruns the decoder
//! over the current prefixes and routes only the last position.

use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::SourceEncoding;
use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::params::ParamStore;
use crate::real::{fmath, Real};
use crate::routing::RouteOptions;
use crate::tensor::Tensor;

/// A finished or truncated output sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Output ids without the closing EOS.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, EOS included when emitted.
    pub log_prob: f64,
    /// `log_prob` divided by the length penalty.
    pub score: f64,
    pub finished: bool,
}

/// `((5 + len) / 6) ^ alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    fmath::powf((5.0 + len as f64) / 6.0, alpha)
}

/// Output length limit for a source of `src_len` tokens, EOS included.
pub fn max_output_len(src_len: usize) -> usize {
    2 * src_len + 10
}

/// Encoder outputs for a set of source sentences.
#[derive(Clone, Debug)]
pub struct Encoded<F> {
    h: Tensor<F>,
    mask: Vec<bool>,
    len: usize,
    lengths: Vec<usize>,
}

impl<F: Real> Encoded<F> {
    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    /// Source length of `row`, EOS excluded.
    pub fn source_len(&self, row: usize) -> usize {
        self.lengths[row] - 1
    }

    fn select(&self, g: &mut Graph<'_, F>, rows: &[usize]) -> SourceEncoding {
        let block = self.h.len() / self.rows();
        let mut data = Vec::with_capacity(rows.len() * block);
        let mut mask = Vec::with_capacity(rows.len() * self.len);
        for &r in rows {
            data.extend_from_slice(&self.h.data()[r * block..(r + 1) * block]);
            mask.extend_from_slice(&self.mask[r * self.len..(r + 1) * self.len]);
        }
        let d = block / self.len;
        let h = Tensor::new(&[rows.len(), self.len, d], data).expect("consistent block size");
        SourceEncoding {
            h: g.constant(h),
            batch: rows.len(),
            len: self.len,
            mask,
        }
    }
}

/// Encodes source ids (without EOS; one is appended).
pub fn encode_sources<F: Real>(model: &Model, store: &ParamStore<F>, sources: &[Vec<usize>]) -> Result<Encoded<F>> {
    if sources.is_empty() {
        return Err(Error::Input("nothing to decode".into()));
    }
    let len = sources.iter().map(|s| s.len() + 1).max().unwrap_or(1);
    let n = sources.len();
    let mut ids = vec![PAD; n * len];
    let mut mask = vec![false; n * len];
    for (r, s) in sources.iter().enumerate() {
        for (i, &id) in s.iter().chain([EOS].iter()).enumerate() {
            ids[r * len + i] = id;
            mask[r * len + i] = true;
        }
    }
    let mut g = Graph::with_params(store);
    let enc = model.backbone.encode(&mut g, &ids, &mask, n, len, &mut None)?;
    Ok(Encoded {
        h: g.value(enc.h).clone(),
        mask,
        len,
        lengths: sources.iter().map(|s| s.len() + 1).collect(),
    })
}

/// Next-token log-probabilities for `prefixes` (generated ids, no BOS) of
/// equal length, each continuing source row `rows[k]`.
pub fn next_log_probs<F: Real>(
    model: &Model,
    store: &ParamStore<F>,
    enc: &Encoded<F>,
    rows: &[usize],
    prefixes: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    let n = prefixes.len();
    let t = prefixes.first().map_or(0, Vec::len);
    if n == 0 || rows.len() != n || prefixes.iter().any(|p| p.len() != t) {
        return Err(Error::Input("prefixes must be non-empty and of equal length".into()));
    }
    let len = t + 1;
    let mut tgt_in = Vec::with_capacity(n * len);
    for p in prefixes {
        tgt_in.push(BOS);
        tgt_in.extend_from_slice(p);
    }
    let mut g = Graph::with_params(store);
    let src = enc.select(&mut g, rows);
    let z = model.backbone.decode_states(&mut g, &tgt_in, &vec![true; n * len], len, &src, &mut None)?;
    let last = g.slice(z, 1, t, 1)?;
    let out = model.head(&mut g, src, last, RouteOptions::default())?;
    let logits = g.value(out.logits);
    let v = logits.len() / n;
    Ok(logits.data().chunks(v).map(log_softmax).collect())
}

fn log_softmax<F: Real>(row: &[F]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = fmath::ln(row.iter().map(|x| fmath::exp(x.as_f64() - max)).sum::<f64>()) + max;
    row.iter().map(|x| x.as_f64() - lse).collect()
}

/// Best token other than PAD and BOS, which are never generated.
fn argmax(row: &[f64]) -> usize {
    let mut best = EOS;
    for (i, &x) in row.iter().enumerate() {
        if i != PAD && i != BOS && x > row[best] {
            best = i;
        }
    }
    best
}

fn greedy_rows<F: Real>(model: &Model, store: &ParamStore<F>, enc: &Encoded<F>, alpha: f64) -> Result<Vec<Hypothesis>> {
    let n = enc.rows();
    let mut hyps: Vec<Hypothesis> = (0..n)
        .map(|_| Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            score: 0.0,
            finished: false,
        })
        .collect();
    let mut active: Vec<usize> = (0..n).collect();
    let mut step = 0;
    while !active.is_empty() {
        let prefixes: Vec<Vec<usize>> = active.iter().map(|&r| hyps[r].tokens.clone()).collect();
        let lps = next_log_probs(model, store, enc, &active, &prefixes)?;
        step += 1;
        let mut still = Vec::with_capacity(active.len());
        for (&r, lp) in active.iter().zip(&lps) {
            let tok = argmax(lp);
            let h = &mut hyps[r];
            h.log_prob += lp[tok];
            if tok == EOS {
                h.finished = true;
                h.score = h.log_prob / length_penalty(step, alpha);
            } else {
                h.tokens.push(tok);
                if step >= max_output_len(enc.source_len(r)) {
                    h.score = h.log_prob / length_penalty(step, alpha);
                } else {
                    still.push(r);
                }
            }
        }
        active = still;
    }
    Ok(hyps)
}

/// Greedy decoding of a batch of sources (ids without EOS).
pub fn greedy<F: Real>(model: &Model, store: &ParamStore<F>, sources: &[Vec<usize>]) -> Result<Vec<Hypothesis>> {
    let enc = encode_sources(model, store, sources)?;
    greedy_rows(model, store, &enc, 0.0)
}

/// Beam search for one source sentence with length-normalized scores.
///
/// The greedy output is always a candidate, so the returned score is never
/// below the greedy score under the same normalization.
pub fn beam_search<F: Real>(
    model: &Model,
    store: &ParamStore<F>,
    source: &[usize],
    beam: usize,
    alpha: f64,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Config("beam size must be positive".into()));
    }
    let enc = encode_sources(model, store, &[source.to_vec()])?;
    let greedy_hyp = greedy_rows(model, store, &enc, alpha)?.remove(0);
    let limit = max_output_len(source.len());
    let bound_penalty = length_penalty(limit, alpha);

    let mut alive: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 1..=limit {
        let prefixes: Vec<Vec<usize>> = alive.iter().map(|a| a.0.clone()).collect();
        let lps = next_log_probs(model, store, &enc, &vec![0; alive.len()], &prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (k, lp) in lps.iter().enumerate() {
            for (tok, &x) in lp.iter().enumerate() {
                if tok != PAD && tok != BOS {
                    cands.push((alive[k].1 + x, k, tok));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next: Vec<(Vec<usize>, f64)> = Vec::with_capacity(beam);
        for (rank, &(lp, k, tok)) in cands.iter().enumerate() {
            if rank >= beam && next.len() >= beam {
                break;
            }
            if tok == EOS {
                if rank < beam {
                    finished.push(Hypothesis {
                        tokens: alive[k].0.clone(),
                        log_prob: lp,
                        score: lp / length_penalty(step, alpha),
                        finished: true,
                    });
                }
            } else if next.len() < beam {
                let mut tokens = alive[k].0.clone();
                tokens.push(tok);
                next.push((tokens, lp));
            }
        }
        if step == limit {
            for (tokens, lp) in next.drain(..) {
                finished.push(Hypothesis {
                    score: lp / length_penalty(step, alpha),
                    tokens,
                    log_prob: lp,
                    finished: false,
                });
            }
        }
        alive = next;
        let best = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let reachable = alive.iter().map(|a| a.1 / bound_penalty).fold(f64::NEG_INFINITY, f64::max);
        if alive.is_empty() || best >= reachable {
            break;
        }
    }
    let mut best = greedy_hyp;
    for h in finished {
        if h.score > best.score {
            best = h;
        }
    }
    Ok(best)
}
