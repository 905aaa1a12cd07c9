//! Randomized routing cases and the invariants every case must satisfy.

use gdr_core::routing::{category_mass, RouteOptions};
use gdr_core::{Graph, RoutingConfig, Tensor};
use proptest::prelude::*;

use super::router;

#[derive(Debug, Clone)]
pub struct Case {
    pub cfg: RoutingConfig,
    pub d: usize,
    pub src: usize,
    pub steps: usize,
    pub mask: Vec<bool>,
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub seed: u64,
    pub scale: f64,
    pub perm: Vec<usize>,
}

pub fn case() -> impl Strategy<Value = Case> {
    (1usize..=3, 1usize..=4, 1usize..=2, 0usize..=2, 1usize..=5, 1usize..=5, 1usize..=2, any::<u64>(), 0.1f64..3.0)
        .prop_flat_map(|(r, dc, per, red, d, src, steps, seed, scale)| {
            let cfg = RoutingConfig {
                iterations: r,
                capsule_dim: dc,
                per_category: per,
                redundant: red,
            };
            (
                Just((cfg, d, src, steps, seed, scale)),
                proptest::collection::vec(any::<bool>(), src),
                0..src,
                proptest::collection::vec(-3.0f64..3.0, src * d),
                proptest::collection::vec(-3.0f64..3.0, steps * d),
                Just((0..src).collect::<Vec<usize>>()).prop_shuffle(),
            )
        })
        .prop_map(|((cfg, d, src, steps, seed, scale), mut mask, keep, h, z, perm)| {
            mask[keep] = true;
            Case {
                cfg,
                d,
                src,
                steps,
                mask,
                h,
                z,
                seed,
                scale,
                perm,
            }
        })
}

macro_rules! ensure {
    ($cond:expr) => {
        if !$cond {
            return Err(format!("violated: {}", stringify!($cond)));
        }
    };
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

macro_rules! ensure_eq {
    ($a:expr, $b:expr) => {
        if $a != $b {
            return Err(format!("{} != {}", stringify!($a), stringify!($b)));
        }
    };
}

/// Row sums, capsule norms, uniform first round, category masses and
/// permutation equivariance for one case.
pub fn check(c: &Case) -> Result<(), String> {
    let (store, router) = router(c.cfg, c.d, c.seed, c.scale);
    let j = c.cfg.num_capsules();
    let mut g = Graph::with_params(&store);
    let h = g.constant(Tensor::from_f64(&[1, c.src, c.d], &c.h).unwrap());
    let z = g.constant(Tensor::from_f64(&[1, c.steps, c.d], &c.z).unwrap());
    let out = router.route(&mut g, h, &c.mask, z, RouteOptions { trace: true, final_update: false }).unwrap();
    let trace = out.trace.unwrap();
    for (round, rec) in trace.iter().enumerate() {
        for row in rec.assign.data().chunks(j) {
            let total: f64 = row.iter().sum();
            ensure!((total - 1.0).abs() < 1e-6);
            if round == 0 {
                ensure!(row.iter().all(|&x| (x - 1.0 / j as f64).abs() < 1e-12));
            }
        }
        for cap in rec.capsules.data().chunks(c.cfg.capsule_dim) {
            let norm = cap.iter().map(|x| x * x).sum::<f64>().sqrt();
            ensure!(norm < 1.0);
        }
        let mass = category_mass(&rec.assign, &c.mask, &c.cfg).unwrap();
        for (r, m) in mass.iter().enumerate() {
            let total: f64 = m.iter().sum();
            if c.mask[r % c.src] {
                ensure!((total - 1.0).abs() < 1e-6);
            } else {
                ensure_eq!(total, 0.0);
            }
        }
    }

    // permuting the source permutes assignment rows and keeps the capsules
    let ph: Vec<f64> = c.perm.iter().flat_map(|&i| c.h[i * c.d..(i + 1) * c.d].to_vec()).collect();
    let pm: Vec<bool> = c.perm.iter().map(|&i| c.mask[i]).collect();
    let h2 = g.constant(Tensor::from_f64(&[1, c.src, c.d], &ph).unwrap());
    let out2 = router.route(&mut g, h2, &pm, z, RouteOptions::default()).unwrap();
    let caps_gap = g.value(out.capsules).max_abs_diff(g.value(out2.capsules));
    ensure!(caps_gap < 1e-6, "capsules moved by {}", caps_gap);
    let (a1, a2) = (g.value(out.assign).data(), g.value(out2.assign).data());
    for t in 0..c.steps {
        for (new_i, &old_i) in c.perm.iter().enumerate() {
            if !c.mask[old_i] {
                continue;
            }
            for jj in 0..j {
                let x = a1[(t * c.src + old_i) * j + jj];
                let y = a2[(t * c.src + new_i) * j + jj];
                ensure!((x - y).abs() < 1e-6);
            }
        }
    }
    Ok(())
}
