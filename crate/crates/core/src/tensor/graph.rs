use std::sync::atomic::{AtomicU64, Ordering};

use super::params::ParamStore;
use super::{Result, TensorError};
use crate::scalar::Scalar;

pub(crate) static STORE_IDS: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_store_id() -> u64 {
    STORE_IDS.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param { store: u64, index: usize },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine { x: Var, scale: T },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Embed { table: Var, ids: Vec<u32> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Softmax(Var),
    LogSoftmax(Var),
    Gather { x: Var, idx: Vec<usize> },
    BroadcastCols { x: Var },
    Reshape(Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<u32>, weights: Vec<T>, probs: Vec<T> },
    Kl { p: Var, q: Var, weights: Vec<T>, p_probs: Vec<T>, q_probs: Vec<T>, row_kl: Vec<T> },
    SquaredError { a: Var, b: Var, weights: Vec<T> },
    Expectile { u: Var, tau: T, weights: Vec<T> },
    ClippedSurrogate { logp: Var, ratio: Vec<T>, adv: Vec<T>, eps: T, weights: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
}

/// A reverse-mode tape. Every op appends a node; [`Graph::backward`] walks the
/// tape once in reverse and leaves per-node gradients behind.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [m, n] => (*m, *n),
        _ => (numel(&shape[..shape.len() - 1]), shape[shape.len() - 1]),
    }
}

fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for &x in row {
        z += (x - max).exp();
    }
    let lse = max + z.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let g = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(g);
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Shape { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() }
    }

    // ----- leaves -----

    pub fn constant(&mut self, shape: &[usize], values: Vec<T>) -> Result<Var> {
        if numel(shape) != values.len() {
            return Err(TensorError::Shape { op: "constant", lhs: shape.to_vec(), rhs: vec![values.len()] });
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf))
    }

    /// Copy of `x` that gradients do not flow through.
    pub fn detach(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let (shape, value) = (node.shape.clone(), node.value.clone());
        self.push(shape, value, Op::Leaf)
    }

    /// Records parameter `index` of `store` as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, index: usize) -> Var {
        let p = store.get(index);
        self.push(p.shape.clone(), p.values.clone(), Op::Param { store: store.uid(), index })
    }

    /// Looks a parameter up by name.
    pub fn param_named(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let index = store.index_of(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        Ok(self.param(store, index))
    }

    // ----- dense algebra -----

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == T::zero() {
                    continue;
                }
                for (o, &y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(x));
        if numel(self.shape(bias)) != n {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let b = self.value(bias).to_vec();
        let out: Vec<T> = self.value(x).chunks(n).flat_map(|r| r.iter().zip(&b).map(|(&v, &c)| v + c)).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, bias)))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).iter().map(|&v| scale * v + shift).collect();
        self.push(self.shape(x).to_vec(), out, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(self.shape(x).to_vec(), out, op)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        self.unary(x, |v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()), Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    // ----- indexing and layout -----

    /// Rows of a `[V, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(TensorError::Shape { op: "embed", lhs: s.to_vec(), rhs: vec![ids.len()] });
        }
        let (vocab, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(TensorError::Index { op: "embed", index: bad as usize, bound: vocab });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i as usize * d..(i as usize + 1) * d]);
        }
        Ok(self.push(vec![ids.len(), d], out, Op::Embed { table, ids: ids.to_vec() }))
    }

    /// `x[i, idx[i]]` for every row, giving shape `[m]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if idx.len() != m {
            return Err(TensorError::Shape { op: "gather", lhs: self.shape(x).to_vec(), rhs: vec![idx.len()] });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(TensorError::Index { op: "gather", index: bad, bound: n });
        }
        let xv = self.value(x);
        let out = idx.iter().enumerate().map(|(i, &j)| xv[i * n + j]).collect();
        Ok(self.push(vec![m], out, Op::Gather { x, idx: idx.to_vec() }))
    }

    /// Repeats a length-`m` vector across `n` columns: `[m] -> [m, n]`.
    pub fn broadcast_cols(&mut self, x: Var, n: usize) -> Var {
        let out = self.value(x).iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        let m = numel(self.shape(x));
        self.push(vec![m, n], out, Op::BroadcastCols { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(TensorError::Shape { op: "reshape", lhs: self.shape(x).to_vec(), rhs: shape.to_vec() });
        }
        let v = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), v, Op::Reshape(x)))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if self.shape(x).len() != 2 || start > end || end > m {
            return Err(TensorError::Shape { op: "slice_rows", lhs: self.shape(x).to_vec(), rhs: vec![start, end] });
        }
        let v = self.value(x)[start * n..end * n].to_vec();
        Ok(self.push(vec![end - start, n], v, Op::SliceRows { x, start }))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Empty("concat_rows"))?;
        let n = rows_cols(self.shape(*first)).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, pn) = rows_cols(self.shape(p));
            if pn != n {
                return Err(self.mismatch("concat_rows", *first, p));
            }
            rows += m;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    // ----- network layers -----

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if numel(self.shape(gain)) != n || numel(self.shape(bias)) != n {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = vec![T::zero(); m * n];
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let nf = T::lit(n as f64);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + T::lit(LN_EPS)).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(vec![m, n], out, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Multi-head causal self-attention over already-projected `q`, `k`, `v`
    /// of shape `[L, d]`; position `i` attends to positions `0..=i`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        let (l, d) = rows_cols(self.shape(q));
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Shape { op: "causal_attention", lhs: vec![l, d], rhs: vec![heads] });
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); heads * l * l];
        let mut out = vec![T::zero(); l * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let p = &mut probs[(h * l + i) * l..(h * l + i) * l + l];
                let qi = &qv[i * d + off..i * d + off + dh];
                let mut max = T::neg_infinity();
                for j in 0..=i {
                    let kj = &kv[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    p[j] = s;
                    max = max.max(s);
                }
                let mut z = T::zero();
                for pj in p.iter_mut().take(i + 1) {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                let o = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    p[j] /= z;
                    let vj = &vv[j * d + off..j * d + off + dh];
                    for (oo, &x) in o.iter_mut().zip(vj) {
                        *oo += p[j] * x;
                    }
                }
            }
        }
        Ok(self.push(vec![l, d], out, Op::Attention { q, k, v, heads, probs }))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, n) = rows_cols(self.shape(x));
        let mut out = vec![T::zero(); self.value(x).len()];
        for (o, r) in out.chunks_mut(n).zip(self.value(x).chunks(n)) {
            log_softmax_row(r, o);
            for v in o.iter_mut() {
                *v = v.exp();
            }
        }
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (_, n) = rows_cols(self.shape(x));
        let mut out = vec![T::zero(); self.value(x).len()];
        for (o, r) in out.chunks_mut(n).zip(self.value(x).chunks(n)) {
            log_softmax_row(r, o);
        }
        self.push(self.shape(x).to_vec(), out, Op::LogSoftmax(x))
    }

    // ----- losses (all reduce to a scalar by weighted sum) -----

    /// `Σ_i w_i · (−log softmax(logits_i)[targets_i])`. Rows with zero weight
    /// are masked out entirely.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], weights: &[T]) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(logits));
        if targets.len() != m || weights.len() != m {
            return Err(TensorError::Shape { op: "cross_entropy", lhs: self.shape(logits).to_vec(), rhs: vec![targets.len(), weights.len()] });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= n) {
            return Err(TensorError::Index { op: "cross_entropy", index: bad as usize, bound: n });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); m * n];
        let mut loss = T::zero();
        for i in 0..m {
            if weights[i] == T::zero() {
                continue;
            }
            let p = &mut probs[i * n..(i + 1) * n];
            log_softmax_row(&lv[i * n..(i + 1) * n], p);
            loss -= weights[i] * p[targets[i] as usize];
            for v in p.iter_mut() {
                *v = v.exp();
            }
        }
        Ok(self.push(vec![], vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs }))
    }

    /// `Σ_i w_i · KL(softmax(p_i) ‖ softmax(q_i))` over rows of two logit matrices.
    pub fn kl_divergence(&mut self, p: Var, q: Var, weights: &[T]) -> Result<Var> {
        self.same_shape("kl_divergence", p, q)?;
        let (m, n) = rows_cols(self.shape(p));
        if weights.len() != m {
            return Err(TensorError::Shape { op: "kl_divergence", lhs: self.shape(p).to_vec(), rhs: vec![weights.len()] });
        }
        let (pv, qv) = (self.value(p), self.value(q));
        let mut p_probs = vec![T::zero(); m * n];
        let mut q_probs = vec![T::zero(); m * n];
        let mut row_kl = vec![T::zero(); m];
        let mut total = T::zero();
        let mut lp = vec![T::zero(); n];
        let mut lq = vec![T::zero(); n];
        for i in 0..m {
            log_softmax_row(&pv[i * n..(i + 1) * n], &mut lp);
            log_softmax_row(&qv[i * n..(i + 1) * n], &mut lq);
            let mut kl = T::zero();
            for j in 0..n {
                let pj = lp[j].exp();
                p_probs[i * n + j] = pj;
                q_probs[i * n + j] = lq[j].exp();
                if pj > T::zero() {
                    kl += pj * (lp[j] - lq[j]);
                }
            }
            row_kl[i] = kl;
            total += weights[i] * kl;
        }
        Ok(self.push(vec![], vec![total], Op::Kl { p, q, weights: weights.to_vec(), p_probs, q_probs, row_kl }))
    }

    /// `Σ_i w_i (a_i − b_i)²`.
    pub fn squared_error(&mut self, a: Var, b: Var, weights: &[T]) -> Result<Var> {
        self.same_shape("squared_error", a, b)?;
        if weights.len() != self.value(a).len() {
            return Err(TensorError::Shape { op: "squared_error", lhs: self.shape(a).to_vec(), rhs: vec![weights.len()] });
        }
        let loss = self.value(a).iter().zip(self.value(b)).zip(weights).map(|((&x, &y), &w)| w * (x - y) * (x - y)).sum();
        Ok(self.push(vec![], vec![loss], Op::SquaredError { a, b, weights: weights.to_vec() }))
    }

    /// Asymmetric squared loss `Σ_i w_i |τ − 1(u_i < 0)| u_i²`.
    pub fn expectile_loss(&mut self, u: Var, tau: T, weights: &[T]) -> Result<Var> {
        if weights.len() != self.value(u).len() {
            return Err(TensorError::Shape { op: "expectile_loss", lhs: self.shape(u).to_vec(), rhs: vec![weights.len()] });
        }
        let loss = self.value(u).iter().zip(weights).map(|(&x, &w)| w * expectile_weight(x, tau) * x * x).sum();
        Ok(self.push(vec![], vec![loss], Op::Expectile { u, tau, weights: weights.to_vec() }))
    }

    /// PPO surrogate `Σ_i w_i min(ρ_i A_i, clip(ρ_i, 1−ε, 1+ε) A_i)` with
    /// `ρ_i = exp(logp_i − old_logp_i)`; `old_logp` and `adv` are constants.
    /// Pass `eps = None` for the unclipped ratio objective.
    pub fn clipped_surrogate(&mut self, logp: Var, old_logp: &[T], adv: &[T], eps: Option<T>, weights: &[T]) -> Result<Var> {
        let m = self.value(logp).len();
        if old_logp.len() != m || adv.len() != m || weights.len() != m {
            return Err(TensorError::Shape { op: "clipped_surrogate", lhs: self.shape(logp).to_vec(), rhs: vec![old_logp.len(), adv.len(), weights.len()] });
        }
        let eps = eps.unwrap_or(T::infinity());
        let ratio: Vec<T> = self.value(logp).iter().zip(old_logp).map(|(&a, &b)| (a - b).exp()).collect();
        let mut obj = T::zero();
        for i in 0..m {
            let clipped = ratio[i].max(T::one() - eps).min(T::one() + eps);
            obj += weights[i] * (ratio[i] * adv[i]).min(clipped * adv[i]);
        }
        Ok(self.push(vec![], vec![obj], Op::ClippedSurrogate { logp, ratio, adv: adv.to_vec(), eps, weights: weights.to_vec() }))
    }

    // ----- reverse pass -----

    /// Backpropagates from a scalar `loss`. A graph can be differentiated once;
    /// call [`Graph::zero_grad`] before differentiating it again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Adds the gradients of every parameter leaf that came from `store`
    /// into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { store: sid, index } = node.op {
                if sid == store.uid() {
                    if let Some(Some(g)) = self.grads.get(i) {
                        store.add_grad(index, g);
                    }
                }
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                accumulate(&mut grads[a.0], m * k, |ga| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga[r * k + p] += gr.iter().zip(&bv[p * n..(p + 1) * n]).map(|(&x, &y)| x * y).sum::<T>();
                        }
                    }
                });
                accumulate(&mut grads[b.0], k * n, |gb| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *o += x * y;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.len(), |ga| add_into(ga, g));
                accumulate(&mut grads[b.0], g.len(), |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], g.len(), |ga| add_into(ga, g));
                accumulate(&mut grads[b.0], g.len(), |gb| {
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                accumulate(&mut grads[b.0], g.len(), |gb| {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            Op::AddBias(x, bias) => {
                let n = len(*bias);
                accumulate(&mut grads[x.0], g.len(), |gx| add_into(gx, g));
                accumulate(&mut grads[bias.0], n, |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Affine { x, scale } => {
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += *scale * v;
                    }
                });
            }
            Op::Gelu(x) => {
                let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
                let xv = &self.nodes[x.0].value;
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    for j in 0..g.len() {
                        let v = xv[j];
                        let t = (c * (v + a * v * v * v)).tanh();
                        let d = half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * v * v);
                        gx[j] += g[j] * d;
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value;
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * (T::one() - y[j] * y[j]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * y[j] * (T::one() - y[j]);
                    }
                });
            }
            Op::Exp(x) => {
                let y = &node.value;
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * y[j];
                    }
                });
            }
            Op::Embed { table, ids } => {
                let d = self.nodes[table.0].shape[1];
                accumulate(&mut grads[table.0], len(*table), |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id as usize * d..(id as usize + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Gather { x, idx } => {
                let n = rows_cols(&self.nodes[x.0].shape).1;
                accumulate(&mut grads[x.0], len(*x), |gx| {
                    for (r, &j) in idx.iter().enumerate() {
                        gx[r * n + j] += g[r];
                    }
                });
            }
            Op::BroadcastCols { x } => {
                let n = node.shape[1];
                accumulate(&mut grads[x.0], len(*x), |gx| {
                    for (r, row) in g.chunks(n).enumerate() {
                        gx[r] += row.iter().copied().sum::<T>();
                    }
                });
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], g.len(), |gx| add_into(gx, g)),
            Op::SliceRows { x, start } => {
                let n = node.shape[1];
                accumulate(&mut grads[x.0], len(*x), |gx| add_into(&mut gx[start * n..start * n + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let l = len(*p);
                    accumulate(&mut grads[p.0], l, |gp| add_into(gp, &g[off..off + l]));
                    off += l;
                }
            }
            Op::Sum(x) => accumulate(&mut grads[x.0], len(*x), |gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = node.shape[1];
                let gv = &self.nodes[gain.0].value;
                let nf = T::lit(n as f64);
                accumulate(&mut grads[gain.0], n, |gg| {
                    for (row, h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += row[j] * h[j];
                        }
                    }
                });
                accumulate(&mut grads[bias.0], n, |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    for (r, (row, h)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..n {
                            let d = row[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * h[j];
                        }
                        mean_d /= nf;
                        mean_dh /= nf;
                        for j in 0..n {
                            let d = row[j] * gv[j];
                            gx[r * n + j] += rstd[r] * (d - mean_d - h[j] * mean_dh);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (l, d) = (node.shape[0], node.shape[1]);
                let dh = d / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
                let mut gq = vec![T::zero(); l * d];
                let mut gk = vec![T::zero(); l * d];
                let mut gvv = vec![T::zero(); l * d];
                let mut dp = vec![T::zero(); l];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..l {
                        let p = &probs[(h * l + i) * l..(h * l + i) * l + l];
                        let go = &g[i * d + off..i * d + off + dh];
                        let mut dot = T::zero();
                        for j in 0..=i {
                            let vj = &vv[j * d + off..j * d + off + dh];
                            dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                            dot += p[j] * dp[j];
                            for (o, &x) in gvv[j * d + off..j * d + off + dh].iter_mut().zip(go) {
                                *o += p[j] * x;
                            }
                        }
                        for j in 0..=i {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            for t in 0..dh {
                                gq[i * d + off + t] += ds * kv[j * d + off + t];
                                gk[j * d + off + t] += ds * qv[i * d + off + t];
                            }
                        }
                    }
                }
                accumulate(&mut grads[q.0], l * d, |o| add_into(o, &gq));
                accumulate(&mut grads[k.0], l * d, |o| add_into(o, &gk));
                accumulate(&mut grads[v.0], l * d, |o| add_into(o, &gvv));
            }
            Op::Softmax(x) => {
                let n = rows_cols(&node.shape).1;
                let y = &node.value;
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    for (r, (gr, yr)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let n = rows_cols(&node.shape).1;
                let y = &node.value;
                accumulate(&mut grads[x.0], g.len(), |gx| {
                    for (r, (gr, yr)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..n {
                            gx[r * n + j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let n = rows_cols(&self.nodes[logits.0].shape).1;
                accumulate(&mut grads[logits.0], len(*logits), |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let w = weights[r] * g[0];
                        if weights[r] == T::zero() {
                            continue;
                        }
                        for j in 0..n {
                            gl[r * n + j] += w * probs[r * n + j];
                        }
                        gl[r * n + t as usize] -= w;
                    }
                });
            }
            Op::Kl { p, q, weights, p_probs, q_probs, row_kl } => {
                let n = rows_cols(&self.nodes[p.0].shape).1;
                let (pv, qv) = (&self.nodes[p.0].value, &self.nodes[q.0].value);
                accumulate(&mut grads[q.0], len(*q), |gq| {
                    for (r, &w) in weights.iter().enumerate() {
                        let w = w * g[0];
                        for j in 0..n {
                            gq[r * n + j] += w * (q_probs[r * n + j] - p_probs[r * n + j]);
                        }
                    }
                });
                accumulate(&mut grads[p.0], len(*p), |gp| {
                    let mut lp = vec![T::zero(); n];
                    let mut lq = vec![T::zero(); n];
                    for (r, &w) in weights.iter().enumerate() {
                        let w = w * g[0];
                        log_softmax_row(&pv[r * n..(r + 1) * n], &mut lp);
                        log_softmax_row(&qv[r * n..(r + 1) * n], &mut lq);
                        for j in 0..n {
                            let pj = p_probs[r * n + j];
                            if pj > T::zero() {
                                gp[r * n + j] += w * pj * ((lp[j] - lq[j]) - row_kl[r]);
                            }
                        }
                    }
                });
            }
            Op::SquaredError { a, b, weights } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let two = T::lit(2.0);
                accumulate(&mut grads[a.0], av.len(), |ga| {
                    for j in 0..av.len() {
                        ga[j] += g[0] * two * weights[j] * (av[j] - bv[j]);
                    }
                });
                accumulate(&mut grads[b.0], bv.len(), |gb| {
                    for j in 0..bv.len() {
                        gb[j] -= g[0] * two * weights[j] * (av[j] - bv[j]);
                    }
                });
            }
            Op::Expectile { u, tau, weights } => {
                let uv = &self.nodes[u.0].value;
                accumulate(&mut grads[u.0], uv.len(), |gu| {
                    for j in 0..uv.len() {
                        gu[j] += g[0] * T::lit(2.0) * weights[j] * expectile_weight(uv[j], *tau) * uv[j];
                    }
                });
            }
            Op::ClippedSurrogate { logp, ratio, adv, eps, weights } => {
                accumulate(&mut grads[logp.0], ratio.len(), |gl| {
                    for j in 0..ratio.len() {
                        let clipped = ratio[j].max(T::one() - *eps).min(T::one() + *eps);
                        // the unclipped branch is the active minimum
                        if ratio[j] * adv[j] <= clipped * adv[j] {
                            gl[j] += g[0] * weights[j] * adv[j] * ratio[j];
                        }
                    }
                });
            }
        }
    }
}

#[inline]
pub(crate) fn expectile_weight<T: Scalar>(u: T, tau: T) -> T {
    if u < T::zero() {
        T::one() - tau
    } else {
        tau
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[1, 4], vec![0.0; 4]).unwrap();
        let y = g.softmax(x);
        assert_eq!(g.value(y), &[0.25; 4]);
    }

    #[test]
    fn kl_of_identical_rows_is_zero() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(&[2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1]).unwrap();
        let kl = g.kl_divergence(p, p, &[1.0, 1.0]).unwrap();
        assert!(g.scalar(kl).abs() < 1e-15);
    }

    #[test]
    fn half_expectile_is_half_squared_error() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(&[4], vec![-1.5, 0.2, 3.0, -0.1]).unwrap();
        let zero = g.constant(&[4], vec![0.0; 4]).unwrap();
        let e = g.expectile_loss(u, 0.5, &[1.0; 4]).unwrap();
        let s = g.squared_error(u, zero, &[1.0; 4]).unwrap();
        assert_eq!(g.scalar(e), 0.5 * g.scalar(s));
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err.to_string(), "shape mismatch in matmul: [2, 3] vs [2, 3]");
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&[2], vec![1.0, 2.0]).unwrap();
        let s = g.sum(a);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::BackwardTwice)));
        g.zero_grad();
        g.backward(s).unwrap();
    }

    #[test]
    fn backward_needs_a_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(a), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn sum_has_all_ones_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(&[2, 2], vec![0.1, -0.2, 0.3, 4.0]).unwrap();
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&[2, 3], vec![1.0, 2.0, 3.0, -4.0, 0.0, 10.0]).unwrap();
        let a = g.log_softmax(x);
        let b = g.softmax(x);
        for (la, pb) in g.value(a).iter().zip(g.value(b)) {
            assert!((la - pb.ln()).abs() < 1e-9);
        }
        for row in g.value(b).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
