//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are recorded in execution order, so the node list is already a
//! topological order. `backward` walks it in reverse and accumulates
//! vector-Jacobian products into per-node gradient buffers.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{contract, Error, Result};
use crate::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn, softmax_in_place};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Transpose(Var),
    Embedding {
        table: Var,
        ids: Vec<Option<usize>>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Range<usize>>,
        heads: usize,
        /// Row-stochastic attention weights, one `len×len` block per
        /// (segment, head), segments outermost.
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(contract("variable does not belong to this tape"))
        }
    }

    /// Records an input value. Gradients are produced only for leaves with
    /// `requires_grad` and for values depending on them.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.nodes[v.0].value.shape();
        if s.len() != 2 {
            return Err(shape_err(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// Elementwise sum. `b` may also be a bias vector matching `a`'s last
    /// extent, which is added to every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let ng = self.needs(a) || self.needs(b);
        if sa == sb {
            let out: Vec<T> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect();
            let shape = sa.to_vec();
            return Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), ng));
        }
        if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            let mut out = self.value(a).data().to_vec();
            let bias = self.value(b).data();
            for row in out.chunks_mut(bias.len()) {
                for (o, &bb) in row.iter_mut().zip(bias) {
                    *o = *o + bb;
                }
            }
            let shape = sa.to_vec();
            return Ok(self.push(Tensor::new(&shape, out)?, Op::AddBias(a, b), ng));
        }
        Err(shape_err("add", sa, sb))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = sa.to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), ng))
    }

    /// Gathers rows of `table` (`V×d`). `None` yields a zero row, which is
    /// how positions filled by another source are left blank.
    pub fn embedding(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        self.check(table)?;
        let (v, d) = self.matrix_dims(table, "embedding")?;
        if ids.is_empty() {
            return Err(contract("embedding lookup needs at least one id"));
        }
        let src = self.value(table).data();
        let mut out = vec![T::zero(); ids.len() * d];
        for (r, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                if id >= v {
                    return Err(contract("embedding id out of range"));
                }
                out[r * d..(r + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
            }
        }
        let ng = self.needs(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (n, d) = self.matrix_dims(x, "layer_norm")?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [d] {
                return Err(shape_err("layer_norm", &[d], self.value(p).shape()));
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                * inv_d;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(&[n, d], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let c = T::of(GELU_C);
        let a = T::of(GELU_A);
        let half = T::of(0.5);
        let out = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        let ng = self.needs(x);
        Ok(self.push(out, Op::Gelu(x), ng))
    }

    /// Multi-head causal softmax attention. Rows of `q`, `k`, `v` are split
    /// into `segments` (one per sequence); each row attends to itself and
    /// earlier rows of its own segment only. Segments must tile the rows in
    /// order.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Range<usize>],
        heads: usize,
    ) -> Result<Var> {
        for x in [q, k, v] {
            self.check(x)?;
        }
        let (n, d) = self.matrix_dims(q, "attention")?;
        for x in [k, v] {
            if self.value(x).shape() != [n, d] {
                return Err(shape_err("attention", &[n, d], self.value(x).shape()));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(contract("attention width must divide evenly into heads"));
        }
        let mut cursor = 0;
        for s in segments {
            if s.start != cursor || s.end <= s.start {
                return Err(contract("attention segments must tile the rows in order"));
            }
            cursor = s.end;
        }
        if cursor != n {
            return Err(contract("attention segments must cover every row"));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let total: usize = segments.iter().map(|s| s.len() * s.len()).sum::<usize>() * heads;
        let mut probs = vec![T::zero(); total];
        let mut out = vec![T::zero(); n * d];
        let mut off = 0;
        for s in segments {
            let len = s.len();
            for h in 0..heads {
                let block = &mut probs[off..off + len * len];
                let cols = h * dh..(h + 1) * dh;
                for i in 0..len {
                    let qi = &qs[(s.start + i) * d..][cols.clone()];
                    let prow = &mut block[i * len..i * len + i + 1];
                    for (j, p) in prow.iter_mut().enumerate() {
                        *p = dot(qi, &ks[(s.start + j) * d..][cols.clone()]) * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(s.start + i) * d..][cols.clone()];
                    for (j, &p) in prow.iter().enumerate() {
                        axpy(orow, p, &vs[(s.start + j) * d..][cols.clone()]);
                    }
                }
                off += len * len;
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::new(&[n, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Mean softmax cross-entropy over rows with a target; rows with `None`
    /// are ignored.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        self.check(logits)?;
        let (n, c) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(shape_err("cross_entropy", &[n], &[targets.len()]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(contract("cross-entropy needs at least one target row"));
        }
        let xs = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= c {
                    return Err(contract("cross-entropy target out of range"));
                }
                let p = &mut probs[r * c..(r + 1) * c];
                p.copy_from_slice(&xs[r * c..(r + 1) * c]);
                let max = p.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let lse = p.iter().fold(T::zero(), |s, &x| s + (x - max).exp()).ln() + max;
                loss = loss + (lse - xs[r * c + t]);
                softmax_in_place(p);
            }
        }
        let loss = loss / T::of(count as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let s = t.data().iter().fold(T::zero(), |a, &b| a + b) / T::of(t.len() as f64);
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), ng))
    }

    /// `x · wᵀ (+ b)` for a weight stored as `out×in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let wt = self.transpose(w)?;
        let y = self.matmul(x, wt)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Propagates d(loss)/d(·) to every recorded value that depends on a
    /// `requires_grad` leaf. Fan-out contributions are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        if !self.value(loss).is_scalar() {
            return Err(contract("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.needs(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.matrix_dims(*a, "matmul")?;
                let (_, n) = self.matrix_dims(*b, "matmul")?;
                if self.needs(*a) {
                    let bd = self.value(*b).data();
                    gemm_nt(slot(grads, *a, m * k), g, bd, m, n, k);
                }
                if self.needs(*b) {
                    let ad = self.value(*a).data();
                    gemm_tn(slot(grads, *b, k * n), ad, g, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if self.needs(x) {
                        let s = slot(grads, x, g.len());
                        axpy(s, T::one(), g);
                    }
                }
            }
            Op::AddBias(a, b) => {
                if self.needs(*a) {
                    axpy(slot(grads, *a, g.len()), T::one(), g);
                }
                if self.needs(*b) {
                    let d = self.value(*b).len();
                    let s = slot(grads, *b, d);
                    for row in g.chunks(d) {
                        axpy(s, T::one(), row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let s = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        s[i] = s[i] + g[i] * bv[i];
                    }
                }
                if self.needs(*b) {
                    let s = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        s[i] = s[i] + g[i] * av[i];
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.matrix_dims(*a, "transpose")?;
                let s = slot(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..n {
                        s[i * n + j] = s[i * n + j] + g[j * m + i];
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (v, d) = self.matrix_dims(*table, "embedding")?;
                let s = slot(grads, *table, v * d);
                for (r, id) in ids.iter().enumerate() {
                    if let Some(id) = *id {
                        axpy(&mut s[id * d..(id + 1) * d], T::one(), &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = self.matrix_dims(*x, "layer_norm")?;
                if self.needs(*beta) {
                    let s = slot(grads, *beta, d);
                    for row in g.chunks(d) {
                        axpy(s, T::one(), row);
                    }
                }
                if self.needs(*gamma) {
                    let s = slot(grads, *gamma, d);
                    for i in 0..n * d {
                        let c = i % d;
                        s[c] = s[c] + g[i] * xhat[i];
                    }
                }
                if self.needs(*x) {
                    let gm = self.value(*gamma).data();
                    let inv_d = T::one() / T::of(d as f64);
                    let s = slot(grads, *x, n * d);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..n {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..d {
                            let v = g[r * d + c] * gm[c];
                            dxhat[c] = v;
                            mean_d = mean_d + v;
                            mean_dx = mean_dx + v * xhat[r * d + c];
                        }
                        mean_d = mean_d * inv_d;
                        mean_dx = mean_dx * inv_d;
                        for c in 0..d {
                            let i = r * d + c;
                            s[i] = s[i] + rstd[r] * (dxhat[c] - mean_d - xhat[i] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let c = T::of(GELU_C);
                let a = T::of(GELU_A);
                let half = T::of(0.5);
                let three = T::of(3.0);
                let xv = self.value(*x).data();
                let s = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    let v = xv[i];
                    let t = (c * (v + a * v * v * v)).tanh();
                    let dt = c * (T::one() + three * a * v * v);
                    let dy = half * (T::one() + t) + half * v * (T::one() - t * t) * dt;
                    s[i] = s[i] + g[i] * dy;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, segments, *heads, probs, g, grads)?,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let (n, c) = self.matrix_dims(*logits, "cross_entropy")?;
                let scale = g[0] / T::of(*count as f64);
                let s = slot(grads, *logits, n * c);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let p = &probs[r * c..(r + 1) * c];
                        let row = &mut s[r * c..(r + 1) * c];
                        for j in 0..c {
                            let oh = if j == t { T::one() } else { T::zero() };
                            row[j] = row[j] + scale * (p[j] - oh);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                let s = slot(grads, *x, n);
                for e in s.iter_mut() {
                    *e = *e + g[0];
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let gg = g[0] / T::of(n as f64);
                let s = slot(grads, *x, n);
                for e in s.iter_mut() {
                    *e = *e + gg;
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Range<usize>],
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let (n, d) = self.matrix_dims(q, "attention")?;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut ds = Vec::new();
        let mut off = 0;
        for s in segments {
            let len = s.len();
            for h in 0..heads {
                let block = &probs[off..off + len * len];
                let cols = h * dh..(h + 1) * dh;
                for i in 0..len {
                    let p = &block[i * len..i * len + i + 1];
                    let go = &g[(s.start + i) * d..][cols.clone()];
                    ds.clear();
                    let mut weighted = T::zero();
                    for (j, &pij) in p.iter().enumerate() {
                        let dp = dot(go, &vs[(s.start + j) * d..][cols.clone()]);
                        ds.push(dp);
                        weighted = weighted + pij * dp;
                        axpy(&mut dv[(s.start + j) * d..][cols.clone()], pij, go);
                    }
                    let qi = &qs[(s.start + i) * d..][cols.clone()];
                    for (j, &pij) in p.iter().enumerate() {
                        let dsij = pij * (ds[j] - weighted) * scale;
                        axpy(
                            &mut dq[(s.start + i) * d..][cols.clone()],
                            dsij,
                            &ks[(s.start + j) * d..][cols.clone()],
                        );
                        axpy(&mut dk[(s.start + j) * d..][cols.clone()], dsij, qi);
                    }
                }
                off += len * len;
            }
        }
        for (x, dx) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs(x) {
                axpy(slot(grads, x, n * d), T::one(), &dx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_by_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).shape(), &[1, 1]);
        assert_eq!(tape.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, [2, 3]);
                assert_eq!(rhs, [2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(t(&[2], &[5.0, 5.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[5.0, 5.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn cross_entropy_of_confident_match_is_small() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 3], &[40.0, 0.0, 0.0]));
        let l = tape.softmax_cross_entropy(z, &[Some(0)]).unwrap();
        assert!(tape.value(l).item() < 1e-12);
    }

    #[test]
    fn attention_first_row_copies_value() {
        let mut tape = Tape::new();
        let q = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(t(&[2, 2], &[0.5, 0.1, 0.2, 0.3]));
        let v = tape.constant(t(&[2, 2], &[7.0, 8.0, 9.0, 10.0]));
        let o = tape.causal_attention(q, k, v, &[0..1, 1..2], 1).unwrap();
        // Each segment holds one row, so each row sees only its own value.
        assert_eq!(tape.value(o).data(), &[7.0, 8.0, 9.0, 10.0]);
    }
}
