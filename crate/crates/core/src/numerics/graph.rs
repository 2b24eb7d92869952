//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends a node; node indices are creation order, so walking the
//! tape backwards is a reverse topological order with deterministic
//! tie-breaking. Gradients accumulate additively into per-node slots.

use super::ops::{self, LayerNormCache};
use super::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    HeadScale {
        x: Var,
        gamma: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Option<Var>,
        center: bool,
        cache: LayerNormCache,
    },
    Gelu(Var),
    ReluSquared(Var),
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        seq_len: usize,
        causal: bool,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Tensor,
        count: usize,
    },
    Sum(Var),
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Computation tape. One graph per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        value.round_to(self.precision);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input (parameter or data) to the tape.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Index of the first node holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.nodes.iter().position(|n| !n.value.all_finite())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_bt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", "b", va, vb));
        }
        let out = va.zip_map(vb, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `[n]` vector to every trailing slice of `x[..., n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = broadcast_row(self.value(x), self.value(row), "add_row", |a, b| a + b)?;
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", "b", va, vb));
        }
        let out = va.zip_map(vb, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Multiplies every trailing slice of `x[..., n]` by a `[n]` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = broadcast_row(self.value(x), self.value(row), "mul_row", |a, b| a * b)?;
        Ok(self.push(out, Op::MulRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// Multiplies column block `i` (of width `d / n_heads`) of `x[rows, d]`
    /// by `gamma[i]`.
    pub fn head_scale(&mut self, x: Var, gamma: Var) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gamma));
        let d = vx.last_dim();
        let h = vg.len();
        if vg.shape().len() != 1 || d % h != 0 {
            return Err(Error::Shape {
                op: "head_scale",
                operand: "gamma",
                expected: vec![h],
                got: vg.shape().to_vec(),
            });
        }
        let dh = d / h;
        let g = vg.data();
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (i, v) in row.iter_mut().enumerate() {
                *v *= g[i / dh];
            }
        }
        Ok(self.push(out, Op::HeadScale { x, gamma }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Option<Var>, eps: f64, center: bool) -> Result<Var> {
        let (out, cache) = ops::layer_norm_with_cache(
            self.value(x),
            self.value(gamma),
            beta.map(|b| self.value(b)),
            eps,
            center,
        )?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                center,
                cache,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        self.push(out, Op::Gelu(x))
    }

    pub fn relu_squared(&mut self, x: Var) -> Var {
        let out = ops::relu_squared(self.value(x));
        self.push(out, Op::ReluSquared(x))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = ops::softmax(self.value(x));
        self.push(out, Op::Softmax(x))
    }

    /// Scaled dot-product attention over `q, k, v: [batch·seq_len, d]`,
    /// split into `n_heads` column blocks. Returns the concatenated heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, seq_len: usize, causal: bool) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        for (name, t) in [("k", vk), ("v", vv)] {
            if t.shape() != vq.shape() {
                return Err(Error::Shape {
                    op: "attention",
                    operand: name,
                    expected: vq.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
        }
        let (rows, d) = (vq.rows(), vq.last_dim());
        if n_heads == 0 || d % n_heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention: cannot split [{rows}, {d}] into {n_heads} heads of sequences of length {seq_len}"
            )));
        }
        let dh = d / n_heads;
        let batch = rows / seq_len;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * n_heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * d];
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut qh = vec![0.0; seq_len * dh];
        let mut kh = vec![0.0; seq_len * dh];
        let mut vh = vec![0.0; seq_len * dh];
        for b in 0..batch {
            for h in 0..n_heads {
                gather_head(qd, &mut qh, b, h, seq_len, d, dh);
                gather_head(kd, &mut kh, b, h, seq_len, d, dh);
                gather_head(vd, &mut vh, b, h, seq_len, d, dh);
                let p = &mut probs[(b * n_heads + h) * seq_len * seq_len..][..seq_len * seq_len];
                for i in 0..seq_len {
                    let visible = if causal { i + 1 } else { seq_len };
                    let prow = &mut p[i * seq_len..(i + 1) * seq_len];
                    let qi = &qh[i * dh..(i + 1) * dh];
                    for j in 0..visible {
                        prow[j] = ops::dot(qi, &kh[j * dh..(j + 1) * dh]) * scale;
                    }
                    ops::softmax_slice(&mut prow[..visible]);
                    let o = &mut out[(b * seq_len + i) * d + h * dh..][..dh];
                    for j in 0..visible {
                        let pij = prow[j];
                        for (ov, &vj) in o.iter_mut().zip(&vh[j * dh..(j + 1) * dh]) {
                            *ov += pij * vj;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vq.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                seq_len,
                causal,
                probs,
            },
        ))
    }

    /// Attention probabilities of an attention node, `[batch, heads, seq, seq]`
    /// flattened. `None` if `v` is not an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Row lookup into `table[vocab, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = (t.shape()[0], t.last_dim());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            out.extend_from_slice(t.row(id));
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument("embedding of an empty sequence".into()));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean token cross entropy over rows of `logits[n, vocab]` where
    /// `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let l = self.value(logits);
        let (n, vocab) = (l.rows(), l.last_dim());
        if targets.len() != n || mask.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                operand: "targets",
                expected: vec![n],
                got: vec![targets.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLossMask);
        }
        let mut probs = ops::softmax(l);
        let mut loss = 0.0;
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            let row = l.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= count as f64;
        // rows outside the mask get no gradient
        for r in 0..n {
            if !mask[r] {
                probs.data_mut()[r * vocab..(r + 1) * vocab].fill(0.0);
            }
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Inverted dropout with an externally drawn keep mask (entries 0 or 1).
    pub fn dropout(&mut self, x: Var, keep_mask: &[bool], p: f64) -> Result<Var> {
        let vx = self.value(x);
        if keep_mask.len() != vx.len() {
            return Err(Error::InvalidArgument("dropout mask length mismatch".into()));
        }
        let s = 1.0 / (1.0 - p);
        let keep: Vec<f64> = keep_mask.iter().map(|&k| if k { s } else { 0.0 }).collect();
        let mut out = vx.clone();
        for (o, k) in out.data_mut().iter_mut().zip(&keep) {
            *o *= k;
        }
        Ok(self.push(out, Op::Dropout { x, keep }))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let ga = slot(grads, *a, va.shape());
                ops::gemm_nt(g.data(), vb.data(), ga.data_mut(), m, n, k);
                let gb = slot(grads, *b, vb.shape());
                ops::gemm_tn(va.data(), g.data(), gb.data_mut(), m, k, n);
            }
            Op::MatMulBt(a, b) => {
                // out[m,n] = a[m,k] b[n,k]ᵀ
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[0];
                let ga = slot(grads, *a, va.shape());
                ops::gemm_nn(g.data(), vb.data(), ga.data_mut(), m, n, k);
                let gb = slot(grads, *b, vb.shape());
                ops::gemm_tn(g.data(), va.data(), gb.data_mut(), m, n, k);
            }
            Op::Add(a, b) => {
                slot(grads, *a, g.shape()).add_assign(g);
                slot(grads, *b, g.shape()).add_assign(g);
            }
            Op::AddRow(x, row) => {
                slot(grads, *x, g.shape()).add_assign(g);
                let n = g.last_dim();
                let gr = slot(grads, *row, &[n]);
                for chunk in g.data().chunks(n) {
                    for (o, v) in gr.data_mut().iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = g.zip_map(vb, |x, y| x * y);
                let gb = g.zip_map(va, |x, y| x * y);
                slot(grads, *a, g.shape()).add_assign(&ga);
                slot(grads, *b, g.shape()).add_assign(&gb);
            }
            Op::MulRow(x, row) => {
                let (vx, vr) = (self.value(*x), self.value(*row));
                let n = g.last_dim();
                let r = vr.data();
                let gx = slot(grads, *x, g.shape());
                for (go, gi) in gx.data_mut().chunks_mut(n).zip(g.data().chunks(n)) {
                    for j in 0..n {
                        go[j] += gi[j] * r[j];
                    }
                }
                let gr = slot(grads, *row, &[n]);
                for (xi, gi) in vx.data().chunks(n).zip(g.data().chunks(n)) {
                    for j in 0..n {
                        gr.data_mut()[j] += xi[j] * gi[j];
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = slot(grads, *x, g.shape());
                for (o, v) in gx.data_mut().iter_mut().zip(g.data()) {
                    *o += v * s;
                }
            }
            Op::HeadScale { x, gamma } => {
                let (vx, vg) = (self.value(*x), self.value(*gamma));
                let d = g.last_dim();
                let h = vg.len();
                let dh = d / h;
                let gam = vg.data().to_vec();
                let gx = slot(grads, *x, g.shape());
                for (go, gi) in gx.data_mut().chunks_mut(d).zip(g.data().chunks(d)) {
                    for j in 0..d {
                        go[j] += gi[j] * gam[j / dh];
                    }
                }
                let gg = slot(grads, *gamma, &[h]);
                for (xi, gi) in vx.data().chunks(d).zip(g.data().chunks(d)) {
                    for j in 0..d {
                        gg.data_mut()[j / dh] += xi[j] * gi[j];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                center,
                cache,
            } => {
                let d = g.last_dim();
                let gam = self.value(*gamma).data();
                let xhat = cache.normalized.data();
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, gi) in g.data().chunks(d).enumerate() {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        dgamma[j] += gi[j] * xh[j];
                        dbeta[j] += gi[j];
                        dxhat[j] = gi[j] * gam[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xh[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    if !*center {
                        mean_dxhat = 0.0;
                    }
                    let rstd = cache.rstd[r];
                    let out = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] = rstd * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
                let gx = slot(grads, *x, g.shape());
                for (o, v) in gx.data_mut().iter_mut().zip(&dx) {
                    *o += v;
                }
                let gg = slot(grads, *gamma, &[d]);
                for (o, v) in gg.data_mut().iter_mut().zip(&dgamma) {
                    *o += v;
                }
                if let Some(b) = beta {
                    let gb = slot(grads, *b, &[d]);
                    for (o, v) in gb.data_mut().iter_mut().zip(&dbeta) {
                        *o += v;
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let d = g.zip_map(vx, |gi, xi| gi * ops::gelu_grad_scalar(xi));
                slot(grads, *x, g.shape()).add_assign(&d);
            }
            Op::ReluSquared(x) => {
                let vx = self.value(*x);
                let d = g.zip_map(vx, |gi, xi| gi * ops::relu_squared_grad_scalar(xi));
                slot(grads, *x, g.shape()).add_assign(&d);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = g.last_dim();
                let gx = slot(grads, *x, g.shape());
                for ((go, gi), yi) in gx
                    .data_mut()
                    .chunks_mut(n)
                    .zip(g.data().chunks(n))
                    .zip(y.data().chunks(n))
                {
                    let s = ops::dot(gi, yi);
                    for j in 0..n {
                        go[j] += yi[j] * (gi[j] - s);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                seq_len,
                causal,
                probs,
            } => self.attention_backward(g, grads, *q, *k, *v, *n_heads, *seq_len, *causal, probs),
            Op::Embedding { table, ids } => {
                let vt = self.value(*table);
                let d = vt.last_dim();
                let gt = slot(grads, *table, vt.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt.data_mut()[id * d..(id + 1) * d];
                    for (o, v) in dst.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let up = g.item() / *count as f64;
                let vocab = probs.last_dim();
                let gl = slot(grads, *logits, probs.shape());
                for r in 0..targets.len() {
                    if !mask[r] {
                        continue;
                    }
                    let dst = &mut gl.data_mut()[r * vocab..(r + 1) * vocab];
                    for (o, p) in dst.iter_mut().zip(probs.row(r)) {
                        *o += up * p;
                    }
                    dst[targets[r]] -= up;
                }
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                let up = g.item();
                let gx = slot(grads, *x, &shape);
                gx.data_mut().iter_mut().for_each(|o| *o += up);
            }
            Op::Dropout { x, keep } => {
                let gx = slot(grads, *x, g.shape());
                for ((o, gi), k) in gx.data_mut().iter_mut().zip(g.data()).zip(keep) {
                    *o += gi * k;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        seq_len: usize,
        causal: bool,
        probs: &[f64],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = (vq.rows(), vq.last_dim());
        let dh = d / n_heads;
        let batch = rows / seq_len;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut qh = vec![0.0; seq_len * dh];
        let mut kh = vec![0.0; seq_len * dh];
        let mut vh = vec![0.0; seq_len * dh];
        let mut gh = vec![0.0; seq_len * dh];
        let mut ds = vec![0.0; seq_len];
        for b in 0..batch {
            for h in 0..n_heads {
                gather_head(vq.data(), &mut qh, b, h, seq_len, d, dh);
                gather_head(vk.data(), &mut kh, b, h, seq_len, d, dh);
                gather_head(vv.data(), &mut vh, b, h, seq_len, d, dh);
                gather_head(g.data(), &mut gh, b, h, seq_len, d, dh);
                let p = &probs[(b * n_heads + h) * seq_len * seq_len..][..seq_len * seq_len];
                for i in 0..seq_len {
                    let visible = if causal { i + 1 } else { seq_len };
                    let prow = &p[i * seq_len..(i + 1) * seq_len];
                    let gi = &gh[i * dh..(i + 1) * dh];
                    // dP_ij = g_i · v_j ; dS = P ∘ (dP − Σ P dP)
                    let mut acc = 0.0;
                    for j in 0..visible {
                        ds[j] = ops::dot(gi, &vh[j * dh..(j + 1) * dh]);
                        acc += prow[j] * ds[j];
                    }
                    for j in 0..visible {
                        ds[j] = prow[j] * (ds[j] - acc) * scale;
                    }
                    let qi = &qh[i * dh..(i + 1) * dh];
                    let dqi = &mut dq[(b * seq_len + i) * d + h * dh..][..dh];
                    for j in 0..visible {
                        let kj = &kh[j * dh..(j + 1) * dh];
                        for t in 0..dh {
                            dqi[t] += ds[j] * kj[t];
                        }
                    }
                    for j in 0..visible {
                        let row = (b * seq_len + j) * d + h * dh;
                        let dkj = &mut dk[row..row + dh];
                        for t in 0..dh {
                            dkj[t] += ds[j] * qi[t];
                        }
                        let dvj = &mut dv[row..row + dh];
                        let pij = prow[j];
                        for t in 0..dh {
                            dvj[t] += pij * gi[t];
                        }
                    }
                }
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            let s = slot(grads, var, g.shape());
            for (o, x) in s.data_mut().iter_mut().zip(&delta) {
                *o += x;
            }
        }
    }
}

fn gather_head(src: &[f64], dst: &mut [f64], b: usize, h: usize, seq_len: usize, d: usize, dh: usize) {
    for i in 0..seq_len {
        let from = (b * seq_len + i) * d + h * dh;
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[from..from + dh]);
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn shape_err(op: &'static str, operand: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        operand,
        expected: a.shape().to_vec(),
        got: b.shape().to_vec(),
    }
}

fn broadcast_row(x: &Tensor, row: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let n = x.last_dim();
    if row.shape() != [n] {
        return Err(Error::Shape {
            op,
            operand: "row",
            expected: vec![n],
            got: row.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_mut(n) {
        for (o, r) in chunk.iter_mut().zip(row.data()) {
            *o = f(*o, *r);
        }
    }
    Ok(out)
}

/// Per-node gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros (shaped like `like`)
    /// when `v` was not reached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }

    pub fn take(&mut self, graph: &Graph, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }
}
