//! Translation likelihood, bag-of-words and content-agreement losses.

use alloc::vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Scalar loss components of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBundle {
    pub nll: f64,
    pub bow: f64,
    pub bca: f64,
    pub total: f64,
    pub lambda_bow: f64,
    pub lambda_bca: f64,
}

impl LossBundle {
    /// `total = nll + λ1 · bow + λ2 · bca`.
    pub fn combine(nll: f64, bow: f64, bca: f64, lambda_bow: f64, lambda_bca: f64) -> Result<LossBundle> {
        if lambda_bow < 0.0 || lambda_bca < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        let total = nll + lambda_bow * bow + lambda_bca * bca;
        if !total.is_finite() {
            return Err(Error::NonFinite("total_loss"));
        }
        Ok(LossBundle {
            nll,
            bow,
            bca,
            total,
            lambda_bow,
            lambda_bca,
        })
    }
}

fn check_rows(op: &'static str, shape: &[usize], batch: usize, len: usize, n: usize) -> Result<()> {
    if shape.len() != 3 || shape[0] != batch || shape[1] != len || n != batch * len {
        return Err(Error::shape(op, shape, &[batch, len]));
    }
    Ok(())
}

/// Mean over unmasked positions of `-log p(gold)`, with optional label
/// smoothing towards the uniform distribution.
pub fn nll_loss<F: Real>(
    g: &mut Graph<'_, F>,
    logits: Var,
    gold: &[usize],
    mask: &[bool],
    smoothing: f64,
) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let vocab = *shape.last().unwrap_or(&0);
    if gold.len() != mask.len() || gold.len() * vocab != g.value(logits).len() {
        return Err(Error::shape("nll_loss", &shape, &[gold.len()]));
    }
    if let Some((&bad, _)) = gold.iter().zip(mask).find(|(&id, &m)| m && id >= vocab) {
        return Err(Error::Input(alloc::format!("gold id {bad} outside vocabulary of {vocab}")));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Input("no unmasked target position".into()));
    }
    let logp = g.log_softmax(logits)?;
    let ids: alloc::vec::Vec<usize> = gold.iter().zip(mask).map(|(&id, &m)| if m { id } else { 0 }).collect();
    let picked = g.pick(logp, &ids)?;
    let scale = (1.0 - smoothing) / count as f64;
    let w = g.constant(Tensor::from_fn(g.shape(picked), |i| if mask[i] { F::of(-scale) } else { F::zero() }));
    let weighted = g.mul(picked, w)?;
    let mut loss = g.sum(weighted)?;
    if smoothing > 0.0 {
        let mut wshape = shape[..shape.len() - 1].to_vec();
        wshape.push(1);
        let per = smoothing / (vocab as f64 * count as f64);
        let w = g.constant(Tensor::from_fn(&wshape, |i| if mask[i] { F::of(-per) } else { F::zero() }));
        let spread = g.mul(logp, w)?;
        let spread = g.sum(spread)?;
        loss = g.add(loss, spread)?;
    }
    Ok(loss)
}

/// Bag-of-words loss over `[B, T, V]` log-probabilities from the past and
/// future heads. Step `t` of sentence `b` is scored against the bag
/// `y_{<=t}` (or `y_{<t}` when `strict_preceding`) for the past head and
/// `y_{>=t}` for the future head. Each sentence is normalized by its length
/// and the batch by its size.
pub fn bow_loss<F: Real>(
    g: &mut Graph<'_, F>,
    past_logp: Var,
    future_logp: Var,
    targets: &[usize],
    mask: &[bool],
    batch: usize,
    len: usize,
    strict_preceding: bool,
) -> Result<Var> {
    let shape = g.shape(past_logp).to_vec();
    check_rows("bow_loss", &shape, batch, len, targets.len())?;
    let vocab = shape[2];
    let mut pre = vec![F::zero(); batch * len * vocab];
    let mut sub = vec![F::zero(); batch * len * vocab];
    for b in 0..batch {
        let row = &targets[b * len..(b + 1) * len];
        let t_len = mask[b * len..(b + 1) * len].iter().filter(|&&m| m).count();
        if t_len == 0 {
            continue;
        }
        let w = F::of(-1.0 / (t_len as f64 * batch as f64));
        for t in 0..t_len {
            let base = (b * len + t) * vocab;
            let upto = if strict_preceding { t } else { t + 1 };
            for &y in &row[..upto] {
                pre[base + y] += w;
            }
            for &y in &row[t..t_len] {
                sub[base + y] += w;
            }
        }
    }
    let pre = g.constant(Tensor::new(&shape, pre)?);
    let sub = g.constant(Tensor::new(&shape, sub)?);
    let a = g.mul(past_logp, pre)?;
    let a = g.sum(a)?;
    let b = g.mul(future_logp, sub)?;
    let b = g.sum(b)?;
    g.add(a, b)
}

/// Squared distance between capsule aggregates and projected running means
/// of the decoder states. The means are computed on a detached copy of `z`.
#[allow(clippy::too_many_arguments)]
pub fn bca_loss<F: Real>(
    g: &mut Graph<'_, F>,
    past: Var,
    future: Var,
    z: Var,
    proj_past: Var,
    proj_future: Var,
    mask: &[bool],
    batch: usize,
    len: usize,
) -> Result<Var> {
    let zs = g.shape(z).to_vec();
    check_rows("bca_loss", &zs, batch, len, mask.len())?;
    let mut avg_past = vec![F::zero(); batch * len * len];
    let mut avg_future = vec![F::zero(); batch * len * len];
    let mut weight = vec![F::zero(); batch * len];
    for b in 0..batch {
        let t_len = mask[b * len..(b + 1) * len].iter().filter(|&&m| m).count();
        for t in 0..t_len {
            let row = (b * len + t) * len;
            for tau in 0..=t {
                avg_past[row + tau] = F::of(1.0 / (t + 1) as f64);
            }
            for tau in t..t_len {
                avg_future[row + tau] = F::of(1.0 / (t_len - t) as f64);
            }
            weight[b * len + t] = F::of(1.0 / (t_len as f64 * batch as f64));
        }
    }
    let zd = g.detach(z);
    let mut terms = vec![];
    for (agg, proj, avg) in [(past, proj_past, avg_past), (future, proj_future, avg_future)] {
        let avg = g.constant(Tensor::new(&[batch, len, len], avg)?);
        let mean = g.matmul(avg, zd)?;
        let target = g.matmul(mean, proj)?;
        let diff = g.sub(agg, target)?;
        let sq = g.mul(diff, diff)?;
        terms.push(sq);
    }
    let w = g.constant(Tensor::new(&[batch, len, 1], weight)?);
    let total = g.add(terms[0], terms[1])?;
    let total = g.mul(total, w)?;
    g.sum(total)
}
