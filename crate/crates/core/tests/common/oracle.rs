//! Brute-force routing evaluator written with plain nested loops. It reads
//! the router weights by name and shares no code with the engine.

#![allow(dead_code)]

pub struct Weights {
    /// `votes[j][a][m]`: input dim `a`, capsule dim `m`.
    pub votes: Vec<Vec<Vec<f64>>>,
    /// `agreement[k][m]` over the concatenation `[z; v; omega]`.
    pub agreement: Vec<Vec<f64>>,
    pub score: Vec<f64>,
}

pub struct Round {
    pub logits_in: Vec<Vec<f64>>,
    pub assign: Vec<Vec<f64>>,
    pub capsules: Vec<Vec<f64>>,
}

pub fn squash(s: &[f64]) -> Vec<f64> {
    let sq: f64 = s.iter().map(|x| x * x).sum();
    let norm = sq.sqrt();
    s.iter().map(|x| sq / (1.0 + sq) * x / (norm + 1e-9)).collect()
}

/// Routes one source sentence `h[i][a]` for one decoder state `z[a]`.
pub fn route(h: &[Vec<f64>], mask: &[bool], z: &[f64], w: &Weights, rounds: usize) -> Vec<Round> {
    let n_in = h.len();
    let n_caps = w.votes.len();
    let dc = w.score.len();
    let d = z.len();

    let mut v = vec![vec![vec![0.0; dc]; n_caps]; n_in];
    for i in 0..n_in {
        if !mask[i] {
            continue;
        }
        for j in 0..n_caps {
            for m in 0..dc {
                let mut acc = 0.0;
                for a in 0..d {
                    acc += h[i][a] * w.votes[j][a][m];
                }
                v[i][j][m] = acc;
            }
        }
    }

    let mut b = vec![vec![0.0; n_caps]; n_in];
    let mut out = Vec::new();
    for _ in 0..rounds {
        let mut c = vec![vec![0.0; n_caps]; n_in];
        for i in 0..n_in {
            let mx = b[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = b[i].iter().map(|x| (x - mx).exp()).sum();
            for j in 0..n_caps {
                c[i][j] = (b[i][j] - mx).exp() / total;
            }
        }
        let mut caps = Vec::new();
        for j in 0..n_caps {
            let mut s = vec![0.0; dc];
            for i in 0..n_in {
                if mask[i] {
                    for m in 0..dc {
                        s[m] += c[i][j] * v[i][j][m];
                    }
                }
            }
            caps.push(squash(&s));
        }
        let logits_in = b.clone();
        for i in 0..n_in {
            for j in 0..n_caps {
                let x: Vec<f64> = z.iter().chain(&v[i][j]).chain(&caps[j]).cloned().collect();
                let mut inc = 0.0;
                for m in 0..dc {
                    let mut pre = 0.0;
                    for (k, xk) in x.iter().enumerate() {
                        pre += xk * w.agreement[k][m];
                    }
                    inc += w.score[m] * pre.tanh();
                }
                b[i][j] += inc;
            }
        }
        out.push(Round {
            logits_in,
            assign: c,
            capsules: caps,
        });
    }
    out
}
