//! Helpers shared by the integration tests.

#![allow(dead_code)]

pub mod gradcheck;
pub mod invariants;
pub mod oracle;

use gdr_core::routing::{RouteOptions, Router};
use gdr_core::{Graph, ParamStore, RoutingConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn oracle_weights(store: &ParamStore<f64>, cfg: &RoutingConfig, d: usize) -> oracle::Weights {
    let dc = cfg.capsule_dim;
    let rows = |name: &str, n: usize, m: usize| -> Vec<Vec<f64>> {
        let t = store.value(store.id(name).unwrap());
        assert_eq!(t.shape(), &[n, m]);
        t.data().chunks(m).map(<[f64]>::to_vec).collect()
    };
    oracle::Weights {
        votes: (0..cfg.num_capsules()).map(|j| rows(&format!("routing.vote.{j}"), d, dc)).collect(),
        agreement: rows("routing.agreement", d + 2 * dc, dc),
        score: rows("routing.score", dc, 1).into_iter().map(|r| r[0]).collect(),
    }
}

pub fn router(cfg: RoutingConfig, d: usize, seed: u64, scale: f64) -> (ParamStore<f64>, Router) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let router = Router::register(&mut store, cfg, d, &mut rng).unwrap();
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    (store, router)
}

/// Deterministic but irregular fixture values.
pub fn wave(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|x| (x as f64 * 0.731 + phase).sin() * 1.3 + (x as f64 * 0.177).cos() * 0.4).collect()
}

/// Routes a `[B, I, d]` source against `[B, T, d]` states with the engine and
/// with the oracle, returning the largest absolute difference over every
/// round's logits, assignments (unmasked rows) and capsules.
pub fn engine_vs_oracle(cfg: RoutingConfig, d: usize, batch: usize, src: usize, steps: usize, mask: &[bool], seed: u64) -> f64 {
    let (store, router) = router(cfg, d, seed, 1.0);
    let w = oracle_weights(&store, &cfg, d);
    let hv = wave(batch * src * d, seed as f64);
    let zv = wave(batch * steps * d, seed as f64 + 2.0);
    let mut g = Graph::with_params(&store);
    let h = g.constant(Tensor::from_f64(&[batch, src, d], &hv).unwrap());
    let z = g.constant(Tensor::from_f64(&[batch, steps, d], &zv).unwrap());
    let out = router
        .route(&mut g, h, mask, z, RouteOptions { trace: true, final_update: true })
        .unwrap();
    let trace = out.trace.unwrap();
    assert_eq!(trace.len(), cfg.iterations);
    let (j, dc) = (cfg.num_capsules(), cfg.capsule_dim);
    let mut worst: f64 = 0.0;
    for b in 0..batch {
        let hb: Vec<Vec<f64>> = (0..src).map(|i| hv[(b * src + i) * d..][..d].to_vec()).collect();
        let mb = &mask[b * src..(b + 1) * src];
        for t in 0..steps {
            let zt = &zv[(b * steps + t) * d..][..d];
            let rounds = oracle::route(&hb, mb, zt, &w, cfg.iterations);
            for (rec, want) in trace.iter().zip(&rounds) {
                for i in 0..src {
                    for jj in 0..j {
                        let at = ((b * steps + t) * src + i) * j + jj;
                        if mb[i] {
                            worst = worst.max((rec.assign.data()[at] - want.assign[i][jj]).abs());
                            worst = worst.max((rec.logits.data()[at] - want.logits_in[i][jj]).abs());
                        }
                    }
                }
                for jj in 0..j {
                    for m in 0..dc {
                        let at = ((b * steps + t) * j + jj) * dc + m;
                        worst = worst.max((rec.capsules.data()[at] - want.capsules[jj][m]).abs());
                    }
                }
            }
            let last = rounds.last().unwrap();
            let fin = g.value(out.capsules);
            for jj in 0..j {
                for m in 0..dc {
                    let at = ((b * steps + t) * j + jj) * dc + m;
                    worst = worst.max((fin.data()[at] - last.capsules[jj][m]).abs());
                }
            }
        }
    }
    worst
}

/// The fixture grid: I in 1..=3, r in 1..=3, two sentences with the second
/// one padded, two decoder states each, plus a minimal three-capsule case.
pub fn oracle_fixture_grid() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for src in 1..=3 {
        for r in 1..=3 {
            let cfg = RoutingConfig {
                iterations: r,
                capsule_dim: 4,
                per_category: 2,
                redundant: 2,
            };
            let mut mask = vec![true; 2 * src];
            if src > 1 {
                mask[2 * src - 1] = false;
            }
            let err = engine_vs_oracle(cfg, 5, 2, src, 2, &mask, (10 * src + r) as u64);
            out.push((format!("I={src} r={r}"), err));
        }
    }
    let cfg = RoutingConfig {
        iterations: 2,
        capsule_dim: 2,
        per_category: 1,
        redundant: 1,
    };
    out.push(("I=2 J=3 d=dc=2".into(), engine_vs_oracle(cfg, 2, 1, 2, 1, &[true, true], 7)));
    out
}
