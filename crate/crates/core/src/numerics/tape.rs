//! Reverse-mode autodiff over 2-D tensors.
//!
//! A [`Tape`] records every op of one forward pass. Nodes only carry
//! gradients when some input does, so frozen subgraphs cost nothing in the
//! backward sweep.

use super::{gemm_new, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu { x: Var, deriv: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Mean(Var),
    Gather { src: Var, idx: Vec<usize> },
    MaskRows { x: Var, fill: Var, mask: Vec<bool> },
    MaxPool { x: Var, arg: Vec<u32> },
    LinearReluMax { x: Var, w: Var, b: Var, arg: Vec<u32> },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    SquaredError(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    pub params: Vec<(ParamId, Vec<T>)>,
    kept: Vec<(Var, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    /// Gradient of a node listed in `keep` when calling `backward_keep`.
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.kept.iter().find(|(k, _)| *k == v).map(|(_, g)| g.as_slice())
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

fn shape_err<V>(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<V> {
    Err(Error::Shape { op, left: a.shape(), right: b.shape() })
}

/// GELU (tanh form) and its derivative.
#[inline(always)]
fn gelu_f<T: Real>(x: T) -> (T, T) {
    let k = T::c(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::c(0.044_715);
    let half = T::c(0.5);
    let one = T::one();
    let u = k * (x + a * x * x * x);
    // tanh(u) = 1 - 2 / (1 + e^{2u}), clamped so e^{2u} stays finite
    let e = (T::c(2.0) * u.max(T::c(-20.0)).min(T::c(20.0))).exp_fast();
    let t = one - T::c(2.0) / (one + e);
    let y = half * x * (one + t);
    let du = k * (one + T::c(3.0) * a * x * x);
    let dy = half * (one + t) + half * x * (one - t * t) * du;
    (y, dy)
}

fn softmax_rows<T: Real>(data: &mut [T], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        for v in row.iter_mut() {
            *v = (*v - mx).exp_fast();
        }
        let s: T = row.iter().copied().sum();
        let inv = T::one() / s;
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn col_sums<T: Real>(g: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in g.chunks_exact(cols) {
        axpy(&mut out, row);
    }
    out
}

/// Per-node gradient buffers during the reverse sweep.
struct Grads<T>(Vec<Option<Vec<T>>>);

impl<T: Real> Grads<T> {
    /// Adds an owned contribution, taking it over when the slot is empty.
    fn add(&mut self, v: Var, contrib: Vec<T>) {
        match &mut self.0[v.0] {
            Some(g) => axpy(g, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Buffer for `v`, zero-initialized on first use.
    fn buf(&mut self, v: Var, len: usize) -> &mut Vec<T> {
        self.0[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }
}

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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows, t.cols)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient can be read back with `backward_keep`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads parameter `id`; it carries gradient only if trainable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return shape_err("matmul", ta, tb);
        }
        let (m, k, n) = (ta.rows, ta.cols, tb.cols);
        let out = gemm_new(m, k, n, T::one(), &ta.data, k, 1, &tb.data, n, 1);
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { rows: m, cols: n, data: out }, Op::MatMul(a, b), g))
    }

    /// `x W + b` with `b` a single row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.cols != tw.rows {
            return shape_err("linear", tx, tw);
        }
        if tb.rows != 1 || tb.cols != tw.cols {
            return shape_err("linear", tw, tb);
        }
        let (m, k, n) = (tx.rows, tx.cols, tw.cols);
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&tb.data);
        }
        T::gemm_raw(m, k, n, T::one(), &tx.data, k, 1, &tw.data, n, 1, T::one(), &mut out, n, 1);
        let g = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor { rows: m, cols: n, data: out }, Op::Linear(x, w, b), g))
    }

    /// Elementwise sum; `b` may be a single row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.cols || (tb.rows != ta.rows && tb.rows != 1) {
            return shape_err("add", ta, tb);
        }
        let mut data = ta.data.clone();
        if tb.rows == ta.rows {
            axpy(&mut data, &tb.data);
        } else {
            for row in data.chunks_exact_mut(ta.cols) {
                axpy(row, &tb.data);
            }
        }
        let out = Tensor { rows: ta.rows, cols: ta.cols, data };
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a);
        let out = Tensor { rows: t.rows, cols: t.cols, data: t.data.iter().map(|&v| v * s).collect() };
        let g = self.ng(a);
        self.push(out, Op::Scale(a, s), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor { rows: t.rows, cols: t.cols, data: t.data.iter().map(|&v| v.max(T::zero())).collect() };
        let g = self.ng(a);
        self.push(out, Op::Relu(a), g)
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.len();
        let mut data = vec![T::zero(); n];
        let mut deriv = vec![T::zero(); n];
        for ((y, d), &v) in data.iter_mut().zip(deriv.iter_mut()).zip(&t.data) {
            (*y, *d) = gelu_f(v);
        }
        let out = Tensor { rows: t.rows, cols: t.cols, data };
        let g = self.ng(a);
        self.push(out, Op::Gelu { x: a, deriv }, g)
    }

    /// Per-row normalization with `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tg.rows != 1 || tg.cols != tx.cols {
            return shape_err("layer_norm", tx, tg);
        }
        if tb.rows != 1 || tb.cols != tx.cols {
            return shape_err("layer_norm", tx, tb);
        }
        let c = tx.cols;
        let inv_c = T::c(1.0 / c as f64);
        let mut xhat = vec![T::zero(); tx.len()];
        let mut rstd = vec![T::zero(); tx.rows];
        let mut out = vec![T::zero(); tx.len()];
        for r in 0..tx.rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + T::c(LN_EPS)).sqrt();
            rstd[r] = rs;
            let xh = &mut xhat[r * c..(r + 1) * c];
            let o = &mut out[r * c..(r + 1) * c];
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xh[j] = h;
                o[j] = h * tg.data[j] + tb.data[j];
            }
        }
        let out = Tensor { rows: tx.rows, cols: c, data: out };
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, g))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut data = t.data.clone();
        softmax_rows(&mut data, t.cols);
        let out = Tensor { rows: t.rows, cols: t.cols, data };
        let g = self.ng(a);
        self.push(out, Op::Softmax(a), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols != cols {
                return shape_err("concat_rows", self.value(parts[0]), t);
            }
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        let g = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatRows(parts.to_vec()), g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows;
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows != rows {
                return shape_err("concat_cols", self.value(parts[0]), t);
            }
            cols += t.cols;
        }
        let mut data = vec![T::zero(); rows * cols];
        let mut at = 0;
        for &p in parts {
            let t = self.value(p);
            for r in 0..rows {
                data[r * cols + at..r * cols + at + t.cols].copy_from_slice(t.row(r));
            }
            at += t.cols;
        }
        let g = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Mean of all entries, as a `1 x 1` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data.iter().copied().sum::<T>() / T::c(t.len() as f64);
        let g = self.ng(a);
        self.push(Tensor::scalar(m), Op::Mean(a), g)
    }

    /// Rows of `table` picked by `ids` (embedding lookup / row gather).
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows) {
            return Err(Error::Shape { op: "embedding_lookup", left: t.shape(), right: vec![bad] });
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor { rows: ids.len(), cols: t.cols, data };
        let g = self.ng(table);
        Ok(self.push(out, Op::Gather { src: table, idx: ids.to_vec() }, g))
    }

    /// Replaces rows of `x` where `mask` is set by the `1 x cols` row `fill`.
    pub fn mask_rows(&mut self, x: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        let (tx, tf) = (self.value(x), self.value(fill));
        if tf.rows != 1 || tf.cols != tx.cols || mask.len() != tx.rows {
            return shape_err("mask_rows", tx, tf);
        }
        let mut data = tx.data.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                data[r * tx.cols..(r + 1) * tx.cols].copy_from_slice(&tf.data);
            }
        }
        let out = Tensor { rows: tx.rows, cols: tx.cols, data };
        let g = self.ng(x) || self.ng(fill);
        Ok(self.push(out, Op::MaskRows { x, fill, mask: mask.to_vec() }, g))
    }

    /// Column-wise max over consecutive groups of `group` rows. Ties keep the
    /// first row.
    pub fn max_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        if group == 0 || t.rows % group != 0 {
            return Err(Error::Shape { op: "max_pool", left: t.shape(), right: vec![group] });
        }
        let (rows, c) = (t.rows / group, t.cols);
        let mut data = vec![T::zero(); rows * c];
        let mut arg = vec![0u32; rows * c];
        for r in 0..rows {
            let best = &mut data[r * c..(r + 1) * c];
            let bi = &mut arg[r * c..(r + 1) * c];
            best.copy_from_slice(t.row(r * group));
            bi.iter_mut().for_each(|i| *i = (r * group) as u32);
            for i in 1..group {
                let src = (r * group + i) as u32;
                for ((b, a), &v) in best.iter_mut().zip(bi.iter_mut()).zip(t.row(src as usize)) {
                    let gt = v > *b;
                    *b = if gt { v } else { *b };
                    *a = if gt { src } else { *a };
                }
            }
        }
        let g = self.ng(x);
        Ok(self.push(Tensor { rows, cols: c, data }, Op::MaxPool { x, arg }, g))
    }

    /// `max_pool(relu(x W + b), group)` without materializing the full
    /// activation. Only the winning row of each output feeds the backward
    /// pass, so it costs `k` multiply-adds per output instead of a dense GEMM.
    pub fn linear_relu_max(&mut self, x: Var, w: Var, b: Var, group: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.cols != tw.rows {
            return shape_err("linear_relu_max", tx, tw);
        }
        if tb.rows != 1 || tb.cols != tw.cols {
            return shape_err("linear_relu_max", tw, tb);
        }
        if group == 0 || tx.rows % group != 0 {
            return Err(Error::Shape { op: "linear_relu_max", left: tx.shape(), right: vec![group] });
        }
        let (k, n) = (tx.cols, tw.cols);
        let rows = tx.rows / group;
        // groups per GEMM call, sized to keep the scratch block in cache
        let chunk = (4096 / group).max(1);
        let mut data = vec![T::zero(); rows * n];
        // u32::MAX marks outputs clipped to zero by the ReLU
        let mut arg = vec![u32::MAX; rows * n];
        let mut scratch: Vec<T> = Vec::new();
        for r0 in (0..rows).step_by(chunk) {
            let r1 = (r0 + chunk).min(rows);
            let m = (r1 - r0) * group;
            scratch.clear();
            for _ in 0..m {
                scratch.extend_from_slice(&tb.data);
            }
            let xs = &tx.data[r0 * group * k..r1 * group * k];
            T::gemm_raw(m, k, n, T::one(), xs, k, 1, &tw.data, n, 1, T::one(), &mut scratch, n, 1);
            for r in r0..r1 {
                let best = &mut data[r * n..(r + 1) * n];
                let bi = &mut arg[r * n..(r + 1) * n];
                for i in 0..group {
                    let local = (r - r0) * group + i;
                    let src = (r * group + i) as u32;
                    for ((bv, a), &v) in best.iter_mut().zip(bi.iter_mut()).zip(&scratch[local * n..(local + 1) * n]) {
                        let gt = v > *bv;
                        *bv = if gt { v } else { *bv };
                        *a = if gt { src } else { *a };
                    }
                }
            }
        }
        let g = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor { rows, cols: n, data }, Op::LinearReluMax { x, w, b, arg }, g))
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// `seq` rows each. `q`, `k`, `v` are `(batch*seq) x dim`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() {
            return shape_err("attention", tq, tk);
        }
        if tq.shape() != tv.shape() {
            return shape_err("attention", tq, tv);
        }
        let d = tq.cols;
        if tq.rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::Shape { op: "attention", left: tq.shape(), right: vec![batch, seq, heads] });
        }
        let dh = d / heads;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                T::gemm_raw(seq, dh, seq, scale, &tq.data[off..], d, 1, &tk.data[off..], 1, d, T::zero(), p, seq, 1);
                softmax_rows(p, seq);
                T::gemm_raw(seq, seq, dh, T::one(), p, seq, 1, &tv.data[off..], d, 1, T::zero(), &mut out[off..], d, 1);
            }
        }
        let g = self.ng(q) || self.ng(k) || self.ng(v);
        let out = Tensor { rows: batch * seq, cols: d, data: out };
        Ok(self.push(out, Op::Attention { q, k, v, batch, seq, heads, probs }, g))
    }

    /// Mean softmax cross-entropy of `logits` rows against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if labels.len() != t.rows || t.rows == 0 {
            return Err(Error::Shape { op: "cross_entropy", left: t.shape(), right: vec![labels.len()] });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= t.cols) {
            return Err(Error::Shape { op: "cross_entropy", left: t.shape(), right: vec![bad] });
        }
        let mut probs = t.data.clone();
        softmax_rows(&mut probs, t.cols);
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            // log-sum-exp in f64 so the reported loss is exact
            let row = t.row(r);
            let mx = row.iter().map(|v| v.f()).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v.f() - mx).exp()).sum::<f64>().ln();
            loss += lse - row[l].f();
        }
        let out = Tensor::scalar(T::c(loss / t.rows as f64));
        let g = self.ng(logits);
        Ok(self.push(out, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, g))
    }

    /// Mean over rows of the squared Euclidean row distance between `a` and `b`.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.rows == 0 {
            return shape_err("squared_error", ta, tb);
        }
        let s: T = ta.data.iter().zip(&tb.data).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(s / T::c(ta.rows as f64));
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::SquaredError(a, b), g))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_keep(loss, &[])
    }

    /// Reverse sweep from the scalar `loss`. Gradients of the nodes in `keep`
    /// are retained in the result.
    pub fn backward_keep(&self, loss: Var, keep: &[Var]) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Shape { op: "backward", left: lt.shape(), right: vec![1, 1] });
        }
        let mut grads = Grads((0..=loss.0).map(|_| None).collect());
        grads.0[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients { params: Vec::new(), kept: Vec::new() };
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads.0[i].take() else { continue };
            if keep.contains(&Var(i)) {
                out.kept.push((Var(i), g.clone()));
            }
            self.backprop(node, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop(&self, node: &Node<T>, g: Vec<T>, grads: &mut Grads<T>, out: &mut Gradients<T>) {
        let val = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.params.push((*id, g)),
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                if self.ng(a) {
                    grads.add(a, gemm_new(m, n, k, T::one(), &g, n, 1, &tb.data, 1, n));
                }
                if self.ng(b) {
                    grads.add(b, gemm_new(k, m, n, T::one(), &ta.data, 1, k, &g, n, 1));
                }
            }
            &Op::Linear(x, w, b) => {
                let (tx, tw) = (self.value(x), self.value(w));
                let (m, k, n) = (tx.rows, tx.cols, tw.cols);
                if self.ng(w) {
                    grads.add(w, gemm_new(k, m, n, T::one(), &tx.data, 1, k, &g, n, 1));
                }
                if self.ng(b) {
                    grads.add(b, col_sums(&g, n));
                }
                if self.ng(x) {
                    grads.add(x, gemm_new(m, n, k, T::one(), &g, n, 1, &tw.data, 1, n));
                }
            }
            &Op::Add(a, b) => {
                if self.ng(b) {
                    if self.value(b).rows != val.rows {
                        grads.add(b, col_sums(&g, val.cols));
                    } else if self.ng(a) {
                        grads.add(b, g.clone());
                    } else {
                        grads.add(b, g);
                        return;
                    }
                }
                if self.ng(a) {
                    grads.add(a, g);
                }
            }
            &Op::Scale(a, s) => {
                let mut g = g;
                g.iter_mut().for_each(|v| *v = *v * s);
                grads.add(a, g);
            }
            &Op::Relu(a) => {
                let mut g = g;
                for (y, o) in g.iter_mut().zip(&val.data) {
                    *y = if *o > T::zero() { *y } else { T::zero() };
                }
                grads.add(a, g);
            }
            Op::Gelu { x, deriv } => {
                let mut g = g;
                for (y, d) in g.iter_mut().zip(deriv) {
                    *y = *y * *d;
                }
                grads.add(*x, g);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = val.cols;
                let gam = &self.value(*gamma).data;
                if self.ng(*gamma) {
                    let mut gg = vec![T::zero(); c];
                    for (grow, xrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + grow[j] * xrow[j];
                        }
                    }
                    grads.add(*gamma, gg);
                }
                if self.ng(*beta) {
                    grads.add(*beta, col_sums(&g, c));
                }
                if self.ng(*x) {
                    let inv_c = T::c(1.0 / c as f64);
                    let mut gx = g;
                    for (r, grow) in gx.chunks_exact_mut(c).enumerate() {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let d = grow[j] * gam[j];
                            s1 = s1 + d;
                            s2 = s2 + d * xh[j];
                        }
                        let (m1, m2) = (s1 * inv_c, s2 * inv_c);
                        for j in 0..c {
                            grow[j] = rstd[r] * (grow[j] * gam[j] - m1 - xh[j] * m2);
                        }
                    }
                    grads.add(*x, gx);
                }
            }
            &Op::Softmax(a) => {
                let c = val.cols;
                let mut g = g;
                for (grow, yrow) in g.chunks_exact_mut(c).zip(val.data.chunks_exact(c)) {
                    let dotp: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        grow[j] = yrow[j] * (grow[j] - dotp);
                    }
                }
                grads.add(a, g);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.ng(p) {
                        grads.add(p, g[at..at + n].to_vec());
                    }
                    at += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = (val.rows, val.cols);
                let mut at = 0;
                for &p in parts {
                    let pc = self.value(p).cols;
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * cols + at..r * cols + at + pc]);
                        }
                        grads.add(p, gp);
                    }
                    at += pc;
                }
            }
            &Op::Mean(a) => {
                let n = self.value(a).len();
                grads.add(a, vec![g[0] / T::c(n as f64); n]);
            }
            Op::Gather { src, idx } => {
                let c = val.cols;
                let n = self.value(*src).len();
                let gs = grads.buf(*src, n);
                for (r, &i) in idx.iter().enumerate() {
                    axpy(&mut gs[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
            Op::MaskRows { x, fill, mask } => {
                let c = val.cols;
                if self.ng(*fill) {
                    let mut gf = vec![T::zero(); c];
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            axpy(&mut gf, &g[r * c..(r + 1) * c]);
                        }
                    }
                    grads.add(*fill, gf);
                }
                if self.ng(*x) {
                    let mut gx = g;
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            gx[r * c..(r + 1) * c].iter_mut().for_each(|v| *v = T::zero());
                        }
                    }
                    grads.add(*x, gx);
                }
            }
            Op::MaxPool { x, arg } => {
                let c = val.cols;
                let n = self.value(*x).len();
                let gx = grads.buf(*x, n);
                for (o, &src) in arg.iter().enumerate() {
                    let at = src as usize * c + o % c;
                    gx[at] = gx[at] + g[o];
                }
            }
            &Op::LinearReluMax { x, w, b, ref arg } => {
                let (tx, tw) = (self.value(x), self.value(w));
                let (k, n) = (tx.cols, tw.cols);
                // W^T rows give contiguous access per output channel
                let wt: Vec<T> = (0..n * k).map(|i| tw.data[(i % k) * n + i / k]).collect();
                let mut dwt = vec![T::zero(); n * k];
                let mut db = vec![T::zero(); n];
                let mut gx = self.ng(x).then(|| vec![T::zero(); tx.len()]);
                for (o, &src) in arg.iter().enumerate() {
                    if src == u32::MAX {
                        continue;
                    }
                    let (c, gv) = (o % n, g[o]);
                    let xr = &tx.data[src as usize * k..(src as usize + 1) * k];
                    for (d, &xv) in dwt[c * k..(c + 1) * k].iter_mut().zip(xr) {
                        *d = *d + xv * gv;
                    }
                    db[c] = db[c] + gv;
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[src as usize * k..(src as usize + 1) * k];
                        for (d, &wv) in dst.iter_mut().zip(&wt[c * k..(c + 1) * k]) {
                            *d = *d + wv * gv;
                        }
                    }
                }
                if self.ng(w) {
                    grads.add(w, (0..k * n).map(|i| dwt[(i % n) * k + i / n]).collect());
                }
                if self.ng(b) {
                    grads.add(b, db);
                }
                if let Some(gx) = gx {
                    grads.add(x, gx);
                }
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                self.attention_backward(&g, [*q, *k, *v], *batch, *seq, *heads, probs, grads);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).cols;
                let s = g[0] / T::c(labels.len() as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * s).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * c + l] = gl[r * c + l] - s;
                }
                grads.add(*logits, gl);
            }
            &Op::SquaredError(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let s = T::c(2.0) * g[0] / T::c(ta.rows as f64);
                let d: Vec<T> = ta.data.iter().zip(&tb.data).map(|(&x, &y)| s * (x - y)).collect();
                if self.ng(b) {
                    grads.add(b, d.iter().map(|&v| -v).collect());
                }
                if self.ng(a) {
                    grads.add(a, d);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self, g: &[T], [q, k, v]: [Var; 3], batch: usize, seq: usize, heads: usize,
        probs: &[T], grads: &mut Grads<T>,
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols;
        let dh = d / heads;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let (nq, nk, nv) = (self.ng(q), self.ng(k), self.ng(v));
        let zeros = |need: bool, n: usize| if need { vec![T::zero(); n] } else { Vec::new() };
        let mut dq = zeros(nq, tq.len());
        let mut dk = zeros(nk, tk.len());
        let mut dv = zeros(nv, tv.len());
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                if nv {
                    T::gemm_raw(seq, seq, dh, T::one(), p, 1, seq, &g[off..], d, 1, T::zero(), &mut dv[off..], d, 1);
                }
                if !(nq || nk) {
                    continue;
                }
                T::gemm_raw(seq, dh, seq, T::one(), &g[off..], d, 1, &tv.data[off..], 1, d, T::zero(), &mut dp, seq, 1);
                for (pr, dr) in p.chunks_exact(seq).zip(dp.chunks_exact_mut(seq)) {
                    let dotp: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (x, &pj) in dr.iter_mut().zip(pr) {
                        *x = pj * (*x - dotp) * scale;
                    }
                }
                if nq {
                    T::gemm_raw(seq, seq, dh, T::one(), &dp, seq, 1, &tk.data[off..], d, 1, T::zero(), &mut dq[off..], d, 1);
                }
                if nk {
                    T::gemm_raw(seq, seq, dh, T::one(), &dp, 1, seq, &tq.data[off..], d, 1, T::zero(), &mut dk[off..], d, 1);
                }
            }
        }
        if nq {
            grads.add(q, dq);
        }
        if nk {
            grads.add(k, dk);
        }
        if nv {
            grads.add(v, dv);
        }
    }
}
