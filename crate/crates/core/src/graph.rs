//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] replays the nodes in reverse creation order, visiting
//! each one once, and accumulates adjoints in a fixed order so that repeated
//! runs produce bit-identical gradients.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Tanh(Var),
    Relu(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Squash(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { a: Var, axis: usize, start: usize },
    Sum(Var),
    Gather { table: Var, ids: Vec<usize> },
    Pick { a: Var, ids: Vec<usize> },
    Agreement { state: Var, votes: Var, caps: Var, score: Var },
}

enum Value<F> {
    Owned(Tensor<F>),
    Param(ParamId),
}

struct Node<F> {
    value: Value<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Grads<F> {
    params: Vec<Option<Tensor<F>>>,
    shapes: Vec<Vec<usize>>,
    leaves: BTreeMap<usize, Tensor<F>>,
}

impl<F: Real> Grads<F> {
    /// Gradient of a parameter; zero when the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Tensor<F> {
        match &self.params[id.index()] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[id.index()]),
        }
    }

    pub fn raw(&self, id: ParamId) -> Option<&[F]> {
        self.params
            .get(id.index())
            .and_then(|g| g.as_ref())
            .map(|t| t.data())
    }

    /// Gradient of a leaf created with [`Graph::variable`].
    pub fn wrt(&self, var: Var) -> Option<&Tensor<F>> {
        self.leaves.get(&var.0)
    }
}

pub struct Graph<'p, F: Real> {
    store: Option<&'p ParamStore<F>>,
    nodes: Vec<Node<F>>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl<F: Real> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Shape helpers

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = if k + a.len() >= rank { a[k + a.len() - rank] } else { 1 };
        let db = if k + b.len() >= rank { b[k + b.len() - rank] } else { 1 };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|k| {
            if k < pad || shape[k - pad] == 1 && out[k] != 1 {
                0
            } else {
                own[k - pad]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out`.
fn for_each_pair(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer = numel(&out[..rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        let (mut ia, mut ib) = (oa, ob);
        for _ in 0..last {
            f(o, ia, ib);
            o += 1;
            ia += la;
            ib += lb;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn gemm<F: Real>(
    (m, k, n): (usize, usize, usize),
    a: &[F],
    (rsa, csa): (usize, usize),
    b: &[F],
    (rsb, csb): (usize, usize),
    c: &mut [F],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    if m * k * n <= SMALL_GEMM || n <= 2 || k <= 2 {
        small_gemm((m, k, n), a, (rsa, csa), b, (rsb, csb), c, accumulate);
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: bounds asserted above; `c` is a distinct mutable borrow.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Below this many multiply-adds a plain loop beats packing into panels.
const SMALL_GEMM: usize = 1 << 16;

fn small_gemm<F: Real>(
    (m, k, n): (usize, usize, usize),
    a: &[F],
    (rsa, csa): (usize, usize),
    b: &[F],
    (rsb, csb): (usize, usize),
    c: &mut [F],
    accumulate: bool,
) {
    let c = &mut c[..m * n];
    if !accumulate {
        c.fill(F::zero());
    }
    if n == 1 && rsa == 1 {
        for p in 0..k {
            let bv = b[p * rsb];
            let col = &a[p * csa..p * csa + m];
            c.iter_mut().zip(col).for_each(|(o, &x)| *o += x * bv);
        }
        return;
    }
    for (i, row) in c.chunks_exact_mut(n).enumerate() {
        if csb == 1 {
            for p in 0..k {
                let av = a[i * rsa + p * csa];
                let br = &b[p * rsb..p * rsb + n];
                row.iter_mut().zip(br).for_each(|(o, &y)| *o += av * y);
            }
        } else if csa == 1 && rsb == 1 {
            let ar = &a[i * rsa..i * rsa + k];
            for (j, out) in row.iter_mut().enumerate() {
                *out += dot(ar, &b[j * csb..j * csb + k]);
            }
        } else {
            for p in 0..k {
                let av = a[i * rsa + p * csa];
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[p * rsb + j * csb];
                }
            }
        }
    }
}

fn dot<F: Real>(x: &[F], y: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let tail = xc.remainder().iter().zip(yc.remainder()).fold(F::zero(), |s, (&a, &b)| s + a * b);
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

type AgreementDims = (usize, usize, usize, usize, usize);

fn agreement_dims(state: &[usize], votes: &[usize], caps: &[usize], score: &[usize]) -> Result<AgreementDims> {
    let err = || Error::shape("agreement", state, votes);
    let ([b, t, c], [vb, i, j, vc], [cb, ct, cj, cc]) = (state, votes, caps) else {
        return Err(err());
    };
    let score_ok = matches!(score, [sc, 1] if sc == c) || matches!(score, [sc] if sc == c);
    if vb != b || cb != b || ct != t || cj != j || vc != c || cc != c || !score_ok {
        return Err(err());
    }
    Ok((*b, *t, *i, *j, *c))
}

/// Calls `f([flat_out_index, b, t, i, j], pre_activation)` for every output entry.
fn agreement_pass<F: Real>(
    (b, t, i, j, c): AgreementDims,
    fs: &[F],
    fv: &[F],
    fc: &[F],
    mut f: impl FnMut([usize; 5], &[F]),
) {
    let mut pre = vec![F::zero(); c];
    let mut o = 0;
    for bb in 0..b {
        for tt in 0..t {
            let srow = &fs[(bb * t + tt) * c..][..c];
            for ii in 0..i {
                for jj in 0..j {
                    let vrow = &fv[((bb * i + ii) * j + jj) * c..][..c];
                    let crow = &fc[((bb * t + tt) * j + jj) * c..][..c];
                    for k in 0..c {
                        pre[k] = srow[k] + vrow[k] + crow[k];
                    }
                    f([o, bb, tt, ii, jj], &pre);
                    o += 1;
                }
            }
        }
    }
}

struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// `b` is a single matrix shared by every batch entry.
    shared_b: bool,
    out_shape: Vec<usize>,
}

fn plan_matmul(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatMulPlan> {
    let err = || Error::shape("matmul", a, b);
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if bk != k {
        return Err(err());
    }
    let mut out_shape = a[..a.len() - 1].to_vec();
    out_shape.push(n);
    if b.len() == 2 {
        return Ok(MatMulPlan {
            batch: 1,
            m: numel(&a[..a.len() - 1]),
            k,
            n,
            shared_b: true,
            out_shape,
        });
    }
    if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(err());
    }
    Ok(MatMulPlan {
        batch: numel(&a[..a.len() - 2]),
        m,
        k,
        n,
        shared_b: false,
        out_shape,
    })
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().unwrap_or(&1);
    (numel(shape) / n.max(1), n)
}

// ---------------------------------------------------------------------------

impl<'p, F: Real> Graph<'p, F> {
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore<F>) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .store
                .expect("parameter node without a store")
                .value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn data(&self, v: Var) -> &[F] {
        self.value(v).data()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => self.rg(*a) || self.rg(*b),
            Op::MatMul { a, b, .. } => self.rg(*a) || self.rg(*b),
            Op::LayerNorm { x, gain, bias, .. } => self.rg(*x) || self.rg(*gain) || self.rg(*bias),
            Op::Concat(vs, _) => vs.iter().any(|v| self.rg(*v)),
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Squash(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Slice { a, .. }
            | Op::Sum(a)
            | Op::Pick { a, .. } => self.rg(*a),
            Op::Gather { table, .. } => self.rg(*table),
            Op::Agreement { state, votes, caps, score } => {
                self.rg(*state) || self.rg(*votes) || self.rg(*caps) || self.rg(*score)
            }
        };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Grads::wrt`].
    pub fn variable(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "graph was created without parameters");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // --- elementwise ---------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (sa_shape, sb_shape) = (self.shape(a), self.shape(b));
        if sa_shape == sb_shape {
            let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(sa_shape, data);
        }
        let out = broadcast_shape(sa_shape, sb_shape).ok_or_else(|| Error::shape(name, sa_shape, sb_shape))?;
        let sa = broadcast_strides(sa_shape, &out);
        let sb = broadcast_strides(sb_shape, &out);
        let (da, db) = (self.data(a), self.data(b));
        let mut data = vec![F::zero(); numel(&out)];
        for_each_pair(&out, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
        Tensor::new(&out, data)
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = F::of(s);
        let t = Tensor::new(self.shape(a), self.data(a).iter().map(|&x| x * s).collect())?;
        self.push(t, Op::Scale(a, s), "scale")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::new(self.shape(a), self.data(a).iter().map(|x| x.fast_tanh()).collect())?;
        self.push(t, Op::Tanh(a), "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::new(self.shape(a), self.data(a).iter().map(|&x| x.max(F::zero())).collect())?;
        self.push(t, Op::Relu(a), "relu")
    }

    // --- linear algebra -------------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a single matrix applied to every leading index of `a`,
    /// or has the same leading (batch) axes as `a`. With `trans_b` the last
    /// two axes of `b` are read transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let plan = plan_matmul(self.shape(a), self.shape(b), trans_b)?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![F::zero(); numel(&plan.out_shape)];
        let (da, db) = (self.data(a), self.data(b));
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        for bi in 0..plan.batch {
            let boff = if plan.shared_b { 0 } else { bi * k * n };
            gemm(
                (m, k, n),
                &da[bi * m * k..(bi + 1) * m * k],
                (k, 1),
                &db[boff..boff + k * n],
                b_strides,
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let t = Tensor::new(&plan.out_shape, out)?;
        self.push(t, Op::MatMul { a, b, trans_b }, "matmul")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false)
    }

    // --- normalizations ------------------------------------------------

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = rows_of(self.shape(a));
        let src = self.data(a);
        let mut out = vec![F::zero(); rows * n];
        for r in 0..rows {
            softmax_row(&src[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(self.shape(a), out)?;
        self.push(t, Op::Softmax(a), "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = rows_of(self.shape(a));
        let src = self.data(a);
        let mut out = vec![F::zero(); rows * n];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
            for (o, &x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let t = Tensor::new(self.shape(a), out)?;
        self.push(t, Op::LogSoftmax(a), "log_softmax")
    }

    /// Layer normalization over the last axis with epsilon `1e-6` inside the root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, n) = rows_of(self.shape(x));
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = F::of(1e-6);
        let nf = F::of(n as f64);
        let (src, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let mut out = vec![F::zero(); rows * n];
        let mut xhat = vec![F::zero(); rows * n];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, "layer_norm")
    }

    /// Capsule squashing over the last axis: `|s|^2 / (1 + |s|^2) * s / (|s| + 1e-9)`.
    pub fn squash(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = rows_of(self.shape(a));
        let src = self.data(a);
        let mut out = vec![F::zero(); rows * n];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let f = squash_factor(row).0;
            for (o, &x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = f * x;
            }
        }
        let t = Tensor::new(self.shape(a), out)?;
        self.push(t, Op::Squash(a), "squash")
    }

    // --- structural ----------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    /// Axis permutation: output axis `k` is input axis `perm[k]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides = contiguous_strides(shape);
        let in_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let zero = vec![0; perm.len()];
        let src = self.data(a);
        let mut out = vec![F::zero(); src.len()];
        for_each_pair(&out_shape, &in_strides, &zero, |o, i, _| out[o] = src[i]);
        let t = Tensor::new(&out_shape, out)?;
        self.push(t, Op::Permute(a, perm.to_vec()), "permute")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(k, (x, y))| k == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * w..(o + 1) * w]);
            }
        }
        let t = Tensor::new(&out_shape, out)?;
        self.push(t, Op::Concat(parts.to_vec(), axis), "concat")
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(&out_shape, out)?;
        self.push(t, Op::Slice { a, axis, start }, "slice")
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Rows of a `[rows, dim]` table, output shaped `lead ++ [dim]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 || numel(lead) != ids.len() {
            return Err(Error::shape("gather", shape, lead));
        }
        let (rows, dim) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(alloc::format!("id {bad} outside table of {rows} rows")));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(dim);
        let t = Tensor::new(&out_shape, out)?;
        self.push(t, Op::Gather { table, ids: ids.to_vec() }, "gather")
    }

    /// For each row over the last axis, the element at `ids[row]`.
    pub fn pick(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let (rows, n) = rows_of(shape);
        if ids.len() != rows {
            return Err(Error::shape("pick", shape, &[ids.len()]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Input(alloc::format!("id {bad} outside last axis of {n}")));
        }
        let src = self.data(a);
        let out: Vec<F> = ids.iter().enumerate().map(|(r, &i)| src[r * n + i]).collect();
        let out_shape = if shape.len() > 1 { shape[..shape.len() - 1].to_vec() } else { vec![1] };
        let t = Tensor::new(&out_shape, out)?;
        self.push(t, Op::Pick { a, ids: ids.to_vec() }, "pick")
    }

    /// Routing agreement scores without materializing the pre-activations:
    ///
    /// `out[b, t, i, j] = Σ_c score[c] · tanh(state[b, t, c] + votes[b, i, j, c] + caps[b, t, j, c])`
    ///
    /// with `state [B, T, C]`, `votes [B, I, J, C]`, `caps [B, T, J, C]` and
    /// `score [C, 1]`; the result has shape `[B, T, I, J]`.
    pub fn agreement(&mut self, state: Var, votes: Var, caps: Var, score: Var) -> Result<Var> {
        let dims = agreement_dims(self.shape(state), self.shape(votes), self.shape(caps), self.shape(score))?;
        let (b, t, i, j, _) = dims;
        let mut out = vec![F::zero(); b * t * i * j];
        let (fs, fv, fc, w) = (self.data(state), self.data(votes), self.data(caps), self.data(score));
        agreement_pass(dims, fs, fv, fc, |[o, ..], pre| {
            let mut acc = F::zero();
            for (&x, &wc) in pre.iter().zip(w) {
                acc += wc * x.fast_tanh();
            }
            out[o] = acc;
        });
        let t = Tensor::new(&[b, t, i, j], out)?;
        self.push(t, Op::Agreement { state, votes, caps, score }, "agreement")
    }

    // --- composite helpers -----------------------------------------------

    /// `x · w + b` with a shared `[in, out]` weight.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // --- reverse pass ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let nparams = self.store.map_or(0, |s| s.len());
        let mut out = Grads {
            params: vec![None; nparams],
            shapes: self
                .store
                .map(|s| s.iter().map(|p| p.value.shape().to_vec()).collect())
                .unwrap_or_default(),
            leaves: BTreeMap::new(),
        };
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let out_shape = self.value(Var(i)).shape();
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, Tensor::new(out_shape, g)?);
                }
                Op::Param(id) => {
                    out.params[id.index()] = Some(Tensor::new(out_shape, g)?);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -F::one() } else { F::one() };
                    self.reduce_into(&mut grads, *a, out_shape, &g, F::one());
                    self.reduce_into(&mut grads, *b, out_shape, &g, sign);
                }
                Op::Mul(a, b) => {
                    for (x, y) in [(*a, *b), (*b, *a)] {
                        if !self.rg(x) {
                            continue;
                        }
                        let (sx, sy) = (self.shape(x), self.shape(y));
                        let s_x = broadcast_strides(sx, out_shape);
                        let s_y = broadcast_strides(sy, out_shape);
                        let dy = self.data(y);
                        let buf = slot(&mut grads, x, numel(sx));
                        for_each_pair(out_shape, &s_x, &s_y, |o, ix, iy| buf[ix] += g[o] * dy[iy]);
                    }
                }
                Op::Scale(a, s) => {
                    if let Some(buf) = self.slot_if(&mut grads, *a) {
                        buf.iter_mut().zip(&g).for_each(|(d, &x)| *d += x * *s);
                    }
                }
                Op::Tanh(a) => {
                    let y = self.data(Var(i));
                    if let Some(buf) = self.slot_if(&mut grads, *a) {
                        for ((d, &x), &yv) in buf.iter_mut().zip(&g).zip(y) {
                            *d += x * (F::one() - yv * yv);
                        }
                    }
                }
                Op::Relu(a) => {
                    let src = self.data(*a);
                    if let Some(buf) = self.slot_if(&mut grads, *a) {
                        for ((d, &x), &v) in buf.iter_mut().zip(&g).zip(src) {
                            if v > F::zero() {
                                *d += x;
                            }
                        }
                    }
                }
                Op::MatMul { a, b, trans_b } => self.matmul_backward(&mut grads, *a, *b, *trans_b, &g)?,
                Op::Softmax(a) => {
                    let y = self.data(Var(i));
                    let (rows, n) = rows_of(out_shape);
                    if let Some(buf) = self.slot_if(&mut grads, *a) {
                        for r in 0..rows {
                            let rg = &g[r * n..(r + 1) * n];
                            let ry = &y[r * n..(r + 1) * n];
                            let dot: F = rg.iter().zip(ry).map(|(&x, &z)| x * z).sum();
                            for j in 0..n {
                                buf[r * n + j] += ry[j] * (rg[j] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let y = self.data(Var(i));
                    let (rows, n) = rows_of(out_shape);
                    if let Some(buf) = self.slot_if(&mut grads, *a) {
                        for r in 0..rows {
                            let rg = &g[r * n..(r + 1) * n];
                            let total: F = rg.iter().copied().sum();
                            for j in 0..n {
                                buf[r * n + j] += rg[j] - y[r * n + j].exp() * total;
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let (rows, n) = rows_of(out_shape);
                    let gn = self.data(*gain);
                    if self.rg(*gain) {
                        let buf = slot(&mut grads, *gain, n);
                        for r in 0..rows {
                            for j in 0..n {
                                buf[j] += g[r * n + j] * xhat[r * n + j];
                            }
                        }
                    }
                    if self.rg(*bias) {
                        let buf = slot(&mut grads, *bias, n);
                        for r in 0..rows {
                            for j in 0..n {
                                buf[j] += g[r * n + j];
                            }
                        }
                    }
                    if let Some(buf) = self.slot_if(&mut grads, *x) {
                        let nf = F::of(n as f64);
                        let mut gx = vec![F::zero(); n];
                        for r in 0..rows {
                            let xh = &xhat[r * n..(r + 1) * n];
                            for j in 0..n {
                                gx[j] = g[r * n + j] * gn[j];
                            }
                            let mean_g = gx.iter().copied().sum::<F>() / nf;
                            let mean_gx = gx.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / nf;
                            for j in 0..n {
                                buf[r * n + j] += rstd[r] * (gx[j] - mean_g - xh[j] * mean_gx);
                            }
                        }
                    }
                }
                Op::Squash(a) => {
                    let src = self.data(*a);
                    let (rows, n) = rows_of(out_shape);
                    if let Some(buf) = self.slot_if(&mut grads, *a) {
                        for r in 0..rows {
                            let s = &src[r * n..(r + 1) * n];
                            let rg = &g[r * n..(r + 1) * n];
                            let (f, df_over_n) = squash_factor(s);
                            let sg: F = s.iter().zip(rg).map(|(&x, &y)| x * y).sum();
                            for j in 0..n {
                                buf[r * n + j] += f * rg[j] + df_over_n * s[j] * sg;
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(buf) = self.slot_if(&mut grads, *a) {
                        buf.iter_mut().zip(&g).for_each(|(d, &x)| *d += x);
                    }
                }
                Op::Permute(a, perm) => {
                    let shape = self.shape(*a);
                    let strides = contiguous_strides(shape);
                    let in_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
                    let zero = vec![0; perm.len()];
                    if let Some(buf) = self.slot_if(&mut grads, *a) {
                        for_each_pair(out_shape, &in_strides, &zero, |o, ix, _| buf[ix] += g[o]);
                    }
                }
                Op::Concat(parts, axis) => {
                    let outer = numel(&out_shape[..*axis]);
                    let inner = numel(&out_shape[axis + 1..]);
                    let total = out_shape[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p)[*axis] * inner;
                        if let Some(buf) = self.slot_if(&mut grads, p) {
                            for o in 0..outer {
                                let src = &g[o * total + offset..o * total + offset + w];
                                buf[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(d, &x)| *d += x);
                            }
                        }
                        offset += w;
                    }
                }
                Op::Slice { a, axis, start } => {
                    let in_shape = self.shape(*a);
                    let outer = numel(&in_shape[..*axis]);
                    let inner = numel(&in_shape[axis + 1..]);
                    let len = out_shape[*axis];
                    let full = in_shape[*axis];
                    if let Some(buf) = self.slot_if(&mut grads, *a) {
                        for o in 0..outer {
                            let base = (o * full + start) * inner;
                            let src = &g[o * len * inner..(o + 1) * len * inner];
                            buf[base..base + len * inner].iter_mut().zip(src).for_each(|(d, &x)| *d += x);
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(buf) = self.slot_if(&mut grads, *a) {
                        buf.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Gather { table, ids } => {
                    let dim = self.shape(*table)[1];
                    if let Some(buf) = self.slot_if(&mut grads, *table) {
                        for (r, &id) in ids.iter().enumerate() {
                            let src = &g[r * dim..(r + 1) * dim];
                            buf[id * dim..(id + 1) * dim].iter_mut().zip(src).for_each(|(d, &x)| *d += x);
                        }
                    }
                }
                Op::Pick { a, ids } => {
                    let n = *self.shape(*a).last().unwrap_or(&1);
                    if let Some(buf) = self.slot_if(&mut grads, *a) {
                        for (r, &id) in ids.iter().enumerate() {
                            buf[r * n + id] += g[r];
                        }
                    }
                }
                Op::Agreement { state, votes, caps, score } => {
                    self.agreement_backward(&mut grads, [*state, *votes, *caps, *score], &g)?;
                }
            }
        }
        Ok(out)
    }

    fn agreement_backward(&self, grads: &mut [Option<Vec<F>>], vars: [Var; 4], g: &[F]) -> Result<()> {
        let [state, votes, caps, score] = vars;
        let dims = agreement_dims(self.shape(state), self.shape(votes), self.shape(caps), self.shape(score))?;
        let (_, t, i, j, c) = dims;
        let (fs, fv, fc, w) = (self.data(state), self.data(votes), self.data(caps), self.data(score));
        let mut d_state = vec![F::zero(); fs.len()];
        let mut d_votes = vec![F::zero(); fv.len()];
        let mut d_caps = vec![F::zero(); fc.len()];
        let mut d_score = vec![F::zero(); c];
        let mut dpre = vec![F::zero(); c];
        agreement_pass(dims, fs, fv, fc, |[o, bb, tt, ii, jj], pre| {
            let go = g[o];
            for k in 0..c {
                let y = pre[k].fast_tanh();
                d_score[k] += go * y;
                dpre[k] = go * w[k] * (F::one() - y * y);
            }
            let s_off = (bb * t + tt) * c;
            let v_off = ((bb * i + ii) * j + jj) * c;
            let c_off = ((bb * t + tt) * j + jj) * c;
            for k in 0..c {
                d_state[s_off + k] += dpre[k];
                d_votes[v_off + k] += dpre[k];
                d_caps[c_off + k] += dpre[k];
            }
        });
        for (v, d) in [(state, d_state), (votes, d_votes), (caps, d_caps), (score, d_score)] {
            if let Some(buf) = self.slot_if(grads, v) {
                buf.iter_mut().zip(&d).for_each(|(acc, &x)| *acc += x);
            }
        }
        Ok(())
    }

    fn slot_if<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        if !self.rg(v) {
            return None;
        }
        Some(slot(grads, v, self.value(v).len()))
    }

    /// Accumulate `sign * g` into `v`, summing over broadcast axes.
    fn reduce_into(&self, grads: &mut [Option<Vec<F>>], v: Var, out_shape: &[usize], g: &[F], sign: F) {
        if !self.rg(v) {
            return;
        }
        let shape = self.shape(v);
        let buf = slot(grads, v, numel(shape));
        if shape == out_shape {
            buf.iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x);
            return;
        }
        let sv = broadcast_strides(shape, out_shape);
        let zero = vec![0; out_shape.len()];
        for_each_pair(out_shape, &sv, &zero, |o, iv, _| buf[iv] += sign * g[o]);
    }

    fn matmul_backward(&self, grads: &mut [Option<Vec<F>>], a: Var, b: Var, trans_b: bool, g: &[F]) -> Result<()> {
        let plan = plan_matmul(self.shape(a), self.shape(b), trans_b)?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        if self.rg(a) {
            let db = self.data(b);
            let buf = slot(grads, a, numel(self.shape(a)));
            // dA = dC · B^T (or dC · B when b is stored transposed)
            let b_strides = if trans_b { (k, 1) } else { (1, n) };
            for bi in 0..plan.batch {
                let boff = if plan.shared_b { 0 } else { bi * k * n };
                gemm(
                    (m, n, k),
                    &g[bi * m * n..(bi + 1) * m * n],
                    (n, 1),
                    &db[boff..boff + k * n],
                    b_strides,
                    &mut buf[bi * m * k..(bi + 1) * m * k],
                    true,
                );
            }
        }
        if self.rg(b) {
            let da = self.data(a);
            let buf = slot(grads, b, numel(self.shape(b)));
            for bi in 0..plan.batch {
                let boff = if plan.shared_b { 0 } else { bi * k * n };
                let gc = &g[bi * m * n..(bi + 1) * m * n];
                let ac = &da[bi * m * k..(bi + 1) * m * k];
                if trans_b {
                    // dB[n, k] = dC^T · A
                    gemm((n, m, k), gc, (1, n), ac, (k, 1), &mut buf[boff..boff + k * n], true);
                } else {
                    // dB[k, n] = A^T · dC
                    gemm((k, m, n), ac, (1, k), gc, (n, 1), &mut buf[boff..boff + k * n], true);
                }
            }
        }
        Ok(())
    }
}

fn slot<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

pub(crate) fn softmax_row<F: Real>(row: &[F], out: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let mut total = F::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// `(f, f'(|s|) / |s|)` where `squash(s) = f * s`.
fn squash_factor<F: Real>(s: &[F]) -> (F, F) {
    let eps = F::of(1e-9);
    let one = F::one();
    let two = F::of(2.0);
    let n2: F = s.iter().map(|&x| x * x).sum();
    let n = n2.sqrt();
    let denom = (one + n2) * (n + eps);
    let f = n2 / denom;
    let df_over_n = (two * (n + eps) - n * (one + n2)) / (denom * denom);
    (f, df_over_n)
}
