//! Guided dynamic routing.
//!
//! Every source encoding `h_i` casts one vote per output capsule,
//! `v_ij = W_j h_i`. Starting from zero logits, each round
//!
//! 1. turns logits into assignment probabilities `c_ij = softmax_j(b_ij)`,
//! 2. forms capsules `Ω_j = squash(Σ_i c_ij v_ij)` over unmasked positions,
//! 3. raises the logits by the decoder-guided agreement
//!    `w · tanh(W_b [z_t; v_ij; Ω_j])`.
//!
//! Capsules are ordered past, future, redundant. Everything is batched over
//! sentences `B` and decoding steps `T`: votes have shape `[B, I, J, dc]`,
//! logits and assignments `[B, T, I, J]`, capsules `[B, T, J, dc]`.
//!
//! `W_b` is stored as a `[d + 2 dc, dc]` matrix applied on the right, so the
//! product with the concatenation splits into three row blocks. The `z_t`
//! and vote blocks do not change across rounds and are computed once; the
//! sum and `tanh` are fused into a single graph op so the
//! `[B, T, I, J, dc]` pre-activations are never stored.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::RoutingConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Trainable routing weights: `J` vote matrices, `W_b` and `w`.
#[derive(Clone, Debug)]
pub struct RoutingWeights {
    pub votes: Vec<ParamId>,
    pub agreement: ParamId,
    pub score: ParamId,
}

impl RoutingWeights {
    pub fn register<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        cfg: &RoutingConfig,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let dc = cfg.capsule_dim;
        let votes = (0..cfg.num_capsules())
            .map(|j| store.init(&format!("routing.vote.{j}"), &[d_model, dc], Init::Xavier, rng))
            .collect::<Result<Vec<_>>>()?;
        let agreement = store.init("routing.agreement", &[d_model + 2 * dc, dc], Init::Xavier, rng)?;
        let score = store.init("routing.score", &[dc, 1], Init::Xavier, rng)?;
        Ok(RoutingWeights { votes, agreement, score })
    }
}

/// Round-invariant quantities of one routing call.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// `v [B, I, J, dc]`, zero on masked positions.
    pub votes: Var,
    /// Votes regrouped per capsule, `[B, J, I, dc]`.
    votes_by_capsule: Var,
    /// `W_b^z z_t`, `[B, T, dc]`.
    from_state: Var,
    /// `W_b^v v_ij`, `[B, I, J, dc]`.
    from_votes: Var,
    /// `[B, 1, I, 1]` source mask.
    mask: Var,
    capsule_block: Var,
    score: Var,
    pub batch: usize,
    pub steps: usize,
    pub src_len: usize,
}

/// Outcome of a single routing round.
#[derive(Clone, Debug)]
pub struct Round {
    /// Assignment probabilities used in this round.
    pub assign: Var,
    pub capsules: Var,
    /// Updated logits; `None` when the update was skipped.
    pub logits: Option<Var>,
}

/// Per-round values kept for inspection.
#[derive(Clone, Debug)]
pub struct IterationRecord<F> {
    /// Logits entering the round.
    pub logits: Tensor<F>,
    pub assign: Tensor<F>,
    pub capsules: Tensor<F>,
}

#[derive(Clone, Debug)]
pub struct RoutingOutput<F> {
    /// Final capsules `[B, T, J, dc]`, ordered past, future, redundant.
    pub capsules: Var,
    /// Final assignment probabilities `[B, T, I, J]`.
    pub assign: Var,
    /// Logits after the last update, when it was computed.
    pub logits: Option<Var>,
    pub trace: Option<Vec<IterationRecord<F>>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RouteOptions {
    /// Keep per-round logits, assignments and capsules.
    pub trace: bool,
    /// Also run the logit update of the final round. It never influences the
    /// returned capsules; it is only needed to report final logits.
    pub final_update: bool,
}

#[derive(Clone, Debug)]
pub struct Router {
    pub cfg: RoutingConfig,
    pub weights: RoutingWeights,
    pub d_model: usize,
}

impl Router {
    pub fn register<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        cfg: RoutingConfig,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let weights = RoutingWeights::register(store, &cfg, d_model, rng)?;
        Ok(Router { cfg, weights, d_model })
    }

    /// Votes `v_ij = W_j h_i` for `h [B, I, d]`, zeroed on masked positions.
    pub fn compute_votes<F: Real>(&self, g: &mut Graph<'_, F>, h: Var, mask: &[bool]) -> Result<Var> {
        let shape = g.shape(h).to_vec();
        let [b, i, d] = shape[..] else {
            return Err(Error::shape("compute_votes", &shape, &[0, 0, self.d_model]));
        };
        if d != self.d_model || mask.len() != b * i {
            return Err(Error::shape("compute_votes", &shape, &[b, i, self.d_model]));
        }
        let (j, dc) = (self.cfg.num_capsules(), self.cfg.capsule_dim);
        let mats: Vec<Var> = self.weights.votes.iter().map(|&p| g.param(p)).collect();
        let w = g.concat(&mats, 1)?;
        let v = g.matmul(h, w)?;
        let v = g.reshape(v, &[b, i, j, dc])?;
        let keep = g.constant(Tensor::from_fn(&[b, i, 1, 1], |x| if mask[x] { F::one() } else { F::zero() }));
        g.mul(v, keep)
    }

    /// Round-invariant setup for `h [B, I, d]` guided by `z [B, T, d]`.
    pub fn prepare<F: Real>(&self, g: &mut Graph<'_, F>, h: Var, mask: &[bool], z: Var) -> Result<Prepared> {
        let hs = g.shape(h).to_vec();
        let zs = g.shape(z).to_vec();
        if hs.len() != 3 || zs.len() != 3 || hs[0] != zs[0] || zs[2] != self.d_model {
            return Err(Error::shape("route", &hs, &zs));
        }
        let (b, i, t) = (hs[0], hs[1], zs[1]);
        if mask.len() != b * i {
            return Err(Error::shape("route mask", &hs, &[mask.len()]));
        }
        for r in 0..b {
            if !mask[r * i..(r + 1) * i].iter().any(|&m| m) {
                return Err(Error::Input(format!("routing source row {r} has no unmasked position")));
            }
        }
        let (dc, d) = (self.cfg.capsule_dim, self.d_model);
        let votes = self.compute_votes(g, h, mask)?;
        let votes_by_capsule = g.permute(votes, &[0, 2, 1, 3])?;

        let wb = g.param(self.weights.agreement);
        let state_block = g.slice(wb, 0, 0, d)?;
        let vote_block = g.slice(wb, 0, d, dc)?;
        let capsule_block = g.slice(wb, 0, d + dc, dc)?;
        let from_state = g.matmul(z, state_block)?;
        let from_votes = g.matmul(votes, vote_block)?;

        let mask_t = g.constant(Tensor::from_fn(&[b, 1, i, 1], |x| if mask[x] { F::one() } else { F::zero() }));
        let score = g.param(self.weights.score);
        Ok(Prepared {
            votes,
            votes_by_capsule,
            from_state,
            from_votes,
            mask: mask_t,
            capsule_block,
            score,
            batch: b,
            steps: t,
            src_len: i,
        })
    }

    /// One round from `logits [B, T, I, J]`.
    pub fn routing_round<F: Real>(&self, g: &mut Graph<'_, F>, p: &Prepared, logits: Var, update: bool) -> Result<Round> {
        let assign = g.softmax(logits)?;
        let masked = g.mul(assign, p.mask)?;
        let by_capsule = g.permute(masked, &[0, 3, 1, 2])?; // [B, J, T, I]
        let s = g.matmul(by_capsule, p.votes_by_capsule)?; // [B, J, T, dc]
        let s = g.permute(s, &[0, 2, 1, 3])?; // [B, T, J, dc]
        let capsules = g.squash(s)?;
        let logits = if update {
            let from_caps = g.matmul(capsules, p.capsule_block)?;
            let inc = g.agreement(p.from_state, p.from_votes, from_caps, p.score)?;
            Some(g.add(logits, inc)?)
        } else {
            None
        };
        Ok(Round { assign, capsules, logits })
    }

    /// Full routing: zero logits, `iterations` rounds, final capsules and assignments.
    pub fn route<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        h: Var,
        mask: &[bool],
        z: Var,
        opts: RouteOptions,
    ) -> Result<RoutingOutput<F>> {
        let p = self.prepare(g, h, mask, z)?;
        let j = self.cfg.num_capsules();
        let mut logits = g.constant(Tensor::zeros(&[p.batch, p.steps, p.src_len, j]));
        let mut trace = opts.trace.then(Vec::new);
        let mut last = None;
        for round in 0..self.cfg.iterations {
            let is_last = round + 1 == self.cfg.iterations;
            let out = self.routing_round(g, &p, logits, !is_last || opts.final_update)?;
            if let Some(tr) = trace.as_mut() {
                tr.push(IterationRecord {
                    logits: g.value(logits).clone(),
                    assign: g.value(out.assign).clone(),
                    capsules: g.value(out.capsules).clone(),
                });
            }
            if let Some(next) = out.logits {
                logits = next;
            }
            last = Some(out);
        }
        let last = last.expect("at least one routing round");
        Ok(RoutingOutput {
            capsules: last.capsules,
            assign: last.assign,
            logits: last.logits,
            trace,
        })
    }
}

/// Summed assignment mass into (past, future, redundant) for every source
/// position of `assign [.., I, J]`. Masked positions report zero mass.
pub fn category_mass<F: Real>(assign: &Tensor<F>, mask: &[bool], cfg: &RoutingConfig) -> Result<Vec<[f64; 3]>> {
    let j = cfg.num_capsules();
    let shape = assign.shape();
    if shape.last() != Some(&j) {
        return Err(Error::shape("category_mass", shape, &[j]));
    }
    let rows = assign.len() / j;
    if mask.len() != rows && rows % mask.len().max(1) != 0 {
        return Err(Error::shape("category_mass mask", shape, &[mask.len()]));
    }
    let data = assign.data();
    let mut out = vec![[0.0; 3]; rows];
    for (r, row) in out.iter_mut().enumerate() {
        if !mask[r % mask.len()] {
            continue;
        }
        let c = &data[r * j..(r + 1) * j];
        row[0] = cfg.past().map(|x| c[x].as_f64()).sum();
        row[1] = cfg.future().map(|x| c[x].as_f64()).sum();
        row[2] = cfg.redundant_range().map(|x| c[x].as_f64()).sum();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (RoutingConfig, ParamStore<f64>, Router) {
        let cfg = RoutingConfig {
            iterations: 3,
            capsule_dim: 3,
            per_category: 2,
            redundant: 2,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let router = Router::register(&mut store, cfg, 4, &mut rng).unwrap();
        (cfg, store, router)
    }

    #[test]
    fn first_round_is_uniform() {
        let (cfg, store, router) = small();
        let mut g = Graph::with_params(&store);
        let h = g.constant(Tensor::from_fn(&[1, 3, 4], |x| (x as f64 * 0.37).sin()));
        let z = g.constant(Tensor::from_fn(&[1, 2, 4], |x| (x as f64 * 0.91).cos()));
        let out = router
            .route(&mut g, h, &[true; 3], z, RouteOptions { trace: true, final_update: true })
            .unwrap();
        let trace = out.trace.unwrap();
        assert_eq!(trace.len(), 3);
        let j = cfg.num_capsules() as f64;
        assert!(trace[0].assign.data().iter().all(|&c| (c - 1.0 / j).abs() < 1e-15));
        assert!(out.logits.is_some());
    }

    #[test]
    fn zero_votes_from_zero_weights() {
        let (_, mut store, router) = small();
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::with_params(&store);
        let h = g.constant(Tensor::from_fn(&[1, 3, 4], |x| x as f64));
        let v = router.compute_votes(&mut g, h, &[true; 3]).unwrap();
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn masked_position_contributes_nothing() {
        let (_, store, router) = small();
        let mut g = Graph::with_params(&store);
        let base: Vec<f64> = (0..12).map(|x| (x as f64 * 0.3).sin()).collect();
        let mut poisoned = base.clone();
        for v in &mut poisoned[8..] {
            *v = 7.5;
        }
        let z = g.constant(Tensor::from_fn(&[1, 1, 4], |x| x as f64 * 0.1));
        let mask = [true, true, false];
        let h1 = g.constant(Tensor::from_f64(&[1, 3, 4], &base).unwrap());
        let h2 = g.constant(Tensor::from_f64(&[1, 3, 4], &poisoned).unwrap());
        let a = router.route(&mut g, h1, &mask, z, RouteOptions::default()).unwrap();
        let b = router.route(&mut g, h2, &mask, z, RouteOptions::default()).unwrap();
        assert_eq!(g.value(a.capsules), g.value(b.capsules));
    }

    #[test]
    fn empty_source_is_rejected() {
        let (_, store, router) = small();
        let mut g = Graph::with_params(&store);
        let h = g.constant(Tensor::zeros(&[1, 2, 4]));
        let z = g.constant(Tensor::zeros(&[1, 1, 4]));
        assert!(matches!(
            router.route(&mut g, h, &[false, false], z, RouteOptions::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn category_mass_cases() {
        let cfg = RoutingConfig::default();
        let uniform = Tensor::<f64>::full(&[2, 6], 1.0 / 6.0);
        for row in category_mass(&uniform, &[true, true], &cfg).unwrap() {
            for m in row {
                assert!((m - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        let forced = Tensor::<f64>::from_f64(&[1, 6], &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(category_mass(&forced, &[true], &cfg).unwrap()[0], [1.0, 0.0, 0.0]);
        let fixture = Tensor::<f64>::from_f64(&[1, 6], &[0.1, 0.2, 0.05, 0.3, 0.25, 0.1]).unwrap();
        let m = category_mass(&fixture, &[true], &cfg).unwrap()[0];
        let want = [0.1 + 0.2, 0.05 + 0.3, 0.25 + 0.1];
        for k in 0..3 {
            assert!((m[k] - want[k]).abs() < 1e-12);
        }
        assert_eq!(category_mass(&fixture, &[false], &cfg).unwrap()[0], [0.0; 3]);
    }
}
