//! Reverse-mode tape over dense tensors.
//!
//! A [`Graph`] records every primitive applied during one forward pass.
//! Parameters are borrowed from a [`ParamStore`] rather than copied, and
//! [`Graph::backward`] returns gradients for every node that needs one.
//! A graph is used for exactly one step; callers build a fresh one per step.

use super::gemm::{gemm, gemm_strided};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Input,
    Param,
    MatMul { a: Var, b: Var, a_t: bool, b_t: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    Attention(Box<AttentionSaved>),
    CrossEntropy { logits: Var, rows: Vec<(usize, usize)>, probs: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SelectRows { a: Var, rows: Vec<usize> },
    Reshape(Var),
    Sum(Var),
}

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    offset: usize,
    causal: bool,
    scale: f64,
    /// heads × c × n, zero at masked positions.
    probs: Vec<f64>,
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(Var, ParamId)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adds `scale ·` each parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) -> Result<()> {
        for &(var, id) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for `{}`",
                        store.get(id).name
                    )));
                }
                let p = store.get_mut(id);
                for (acc, x) in p.grad.iter_mut().zip(g) {
                    *acc += scale * x;
                }
            }
        }
        Ok(())
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(_, p)| *p == id)
            .and_then(|(v, _)| self.grads[v.0].as_deref())
    }
}

fn dim_err<T>(msg: String) -> Result<T> {
    Err(Error::Dimension(msg))
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.value(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output from {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            needs_grad: self.params.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::Validation(format!("unknown parameter `{name}`")))?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return dim_err(format!("matmul needs matrices, got {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let (m, k) = if a_t { (ta.cols(), ta.rows()) } else { (ta.rows(), ta.cols()) };
        let (k2, n) = if b_t { (tb.cols(), tb.rows()) } else { (tb.rows(), tb.cols()) };
        if k != k2 {
            return dim_err(format!("matmul inner dimensions {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), a_t, tb.data(), b_t, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, a_t, b_t }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return dim_err(format!("add {:?} + {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tr.len() != n {
            return dim_err(format!("add_row {:?} + {:?}", ta.shape(), tr.shape()));
        }
        let r = tr.data();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(row);
        self.push(t, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return dim_err(format!("mul {:?} * {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect())?;
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.tanh()).collect())?;
        let ng = self.ng(a);
        self.push(t, Op::Tanh(a), ng)
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.cols();
        if tg.len() != n || tb.len() != n || n == 0 {
            return dim_err(format!("layer_norm width {n} vs gamma {:?}", tg.shape()));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; rows * n];
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        if axis >= shape.len().max(1) {
            return dim_err(format!("softmax axis {axis} for shape {shape:?}"));
        }
        let dims = if shape.is_empty() { vec![1] } else { shape.clone() };
        let len = dims[axis];
        if len == 0 {
            return dim_err("softmax over an empty axis".into());
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out = ta.data().to_vec();
        softmax_strided(&mut out, outer, len, inner);
        let ng = self.ng(a);
        self.push(Tensor::new(shape, out)?, Op::Softmax { a, outer, len, inner }, ng)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `c × heads·d_k`, `k` is `n × heads·d_k`, `v` is `n × heads·d_v`.
    /// With `causal`, query row `i` sees key rows `0..=offset + i`, which
    /// requires `n == offset + c`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, offset: usize, causal: bool) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (c, n) = (tq.rows(), tk.rows());
        if heads == 0 || tq.cols() % heads != 0 || tv.cols() % heads != 0 {
            return dim_err(format!("attention widths {} / {} not divisible by {heads} heads", tq.cols(), tv.cols()));
        }
        if tk.cols() != tq.cols() {
            return dim_err(format!("attention key width {} vs query width {}", tk.cols(), tq.cols()));
        }
        if n == 0 {
            return dim_err("attention over zero keys".into());
        }
        if tv.rows() != n {
            return dim_err(format!("attention has {n} keys but {} values", tv.rows()));
        }
        if causal && n != offset + c {
            return dim_err(format!("causal attention needs {} keys, got {n}", offset + c));
        }
        let dk = tq.cols() / heads;
        let dv = tv.cols() / heads;
        let (wq, wv) = (tq.cols() as isize, tv.cols() as isize);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut probs = vec![0.0; heads * c * n];
        let mut out = vec![0.0; c * heads * dv];
        for h in 0..heads {
            let p = &mut probs[h * c * n..(h + 1) * c * n];
            // SAFETY: strided views stay within the q/k/v/out buffers.
            unsafe {
                gemm_strided(
                    c, dk, n, scale,
                    tq.data().as_ptr().add(h * dk), wq, 1,
                    tk.data().as_ptr().add(h * dk), 1, wq,
                    p.as_mut_ptr(), n as isize, 1, 0.0,
                );
            }
            for i in 0..c {
                let lim = if causal { offset + i + 1 } else { n };
                let row = &mut p[i * n..(i + 1) * n];
                softmax_slice(&mut row[..lim]);
                row[lim..].iter_mut().for_each(|x| *x = 0.0);
            }
            unsafe {
                gemm_strided(
                    c, n, dv, 1.0,
                    p.as_ptr(), n as isize, 1,
                    tv.data().as_ptr().add(h * dv), wv, 1,
                    out.as_mut_ptr().add(h * dv), wv, 1, 0.0,
                );
            }
        }
        let t = Tensor::matrix(c, heads * dv, out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let saved = AttentionSaved { q, k, v, heads, offset, causal, scale, probs };
        self.push(t, Op::Attention(Box::new(saved)), ng)
    }

    /// Attention probabilities (`heads × c × n`) saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(s) => Some(&s.probs),
            _ => None,
        }
    }

    /// Mean negative log-likelihood over rows with `mask[i] == true`.
    /// With no unmasked rows the loss is 0 and carries no gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (t, vocab) = (tl.rows(), tl.cols());
        if targets.len() != t || mask.len() != t {
            return dim_err(format!(
                "cross_entropy over {t} rows with {} targets and {} mask entries",
                targets.len(),
                mask.len()
            ));
        }
        let mut rows = Vec::new();
        let mut probs = Vec::new();
        let mut total = 0.0;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let target = targets[i];
            if target >= vocab {
                return dim_err(format!("target id {target} outside vocabulary of {vocab}"));
            }
            let row = tl.row_slice(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[target];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
            rows.push((i, target));
        }
        let loss = if rows.is_empty() { 0.0 } else { total / rows.len() as f64 };
        let ng = self.ng(logits) && !rows.is_empty();
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, rows, probs }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat of nothing".into());
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return dim_err(format!("concat widths {cols} vs {}", t.cols()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + len > ta.rows() {
            return dim_err(format!("rows {start}..{} of {}", start + len, ta.rows()));
        }
        let c = ta.cols();
        let data = ta.data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        self.push(Tensor::matrix(len, c, data)?, Op::SliceRows { a, start }, ng)
    }

    /// Gathers rows by index; also serves as an embedding lookup.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= ta.rows() {
                return dim_err(format!("row {r} of {}", ta.rows()));
            }
            data.extend_from_slice(ta.row_slice(r));
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(rows.len(), c, data)?, Op::SelectRows { a, rows: rows.to_vec() }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return dim_err(format!("backward from non-scalar {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.ng(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(id, v)| v.map(|v| (v, id)))
            .filter(|(v, _)| self.ng(*v))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Input | Op::Param => {}
            Op::MatMul { a, b, a_t, b_t } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n) = (out.rows(), out.cols());
                let k = if *a_t { ta.rows() } else { ta.cols() };
                if self.ng(*a) {
                    let da = slot(grads, *a, ta.len());
                    if *a_t {
                        gemm(k, n, m, tb.data(), *b_t, g, true, da, 1.0);
                    } else {
                        gemm(m, n, k, g, false, tb.data(), !*b_t, da, 1.0);
                    }
                }
                if self.ng(*b) {
                    let db = slot(grads, *b, tb.len());
                    if *b_t {
                        gemm(n, m, k, g, true, ta.data(), *a_t, db, 1.0);
                    } else {
                        gemm(k, m, n, ta.data(), !*a_t, g, false, db, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddRow(a, r) => {
                if self.ng(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.ng(*r) {
                    let n = out.cols();
                    let dr = slot(grads, *r, n);
                    for chunk in g.chunks(n) {
                        add_into(dr, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let da = slot(grads, *a, g.len());
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(tb.data()) {
                        *d += gi * y;
                    }
                }
                if self.ng(*b) {
                    let db = slot(grads, *b, g.len());
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(ta.data()) {
                        *d += gi * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                let da = slot(grads, *a, g.len());
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += gi * c;
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let da = slot(grads, *a, g.len());
                for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                    *d += gi * gelu_grad(*xi);
                }
            }
            Op::Tanh(a) => {
                let da = slot(grads, *a, g.len());
                for ((d, gi), y) in da.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * (1.0 - y * y);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = out.cols();
                let rows = out.rows();
                let tg = self.value(*gamma).data().to_vec();
                if self.ng(*gamma) {
                    let dg = slot(grads, *gamma, n);
                    for r in 0..rows {
                        for c in 0..n {
                            dg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if self.ng(*beta) {
                    let db = slot(grads, *beta, n);
                    for chunk in g.chunks(n) {
                        add_into(db, chunk);
                    }
                }
                if self.ng(*x) {
                    let dx = slot(grads, *x, rows * n);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            let d = g[r * n + c] * tg[c];
                            dxhat[c] = d;
                            mean_d += d;
                            mean_dx += d * xhat[r * n + c];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for c in 0..n {
                            dx[r * n + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax { a, outer, len, inner } => {
                let y = out.data();
                let da = slot(grads, *a, g.len());
                for o in 0..*outer {
                    for j in 0..*inner {
                        let base = o * len * inner + j;
                        let dot: f64 = (0..*len).map(|t| g[base + t * inner] * y[base + t * inner]).sum();
                        for t in 0..*len {
                            let idx = base + t * inner;
                            da[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::Attention(s) => self.backprop_attention(s, g, grads),
            Op::CrossEntropy { logits, rows, probs } => {
                let vocab = self.value(*logits).cols();
                let total = self.value(*logits).len();
                let scale = g[0] / rows.len() as f64;
                let dl = slot(grads, *logits, total);
                for (r, &(row, target)) in rows.iter().enumerate() {
                    let p = &probs[r * vocab..(r + 1) * vocab];
                    let d = &mut dl[row * vocab..(row + 1) * vocab];
                    for (di, pi) in d.iter_mut().zip(p) {
                        *di += scale * pi;
                    }
                    d[target] -= scale;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.ng(p) {
                        add_into(slot(grads, p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows { a, start } => {
                let ta = self.value(*a);
                let c = ta.cols();
                let da = slot(grads, *a, ta.len());
                add_into(&mut da[start * c..start * c + g.len()], g);
            }
            Op::SelectRows { a, rows } => {
                let ta = self.value(*a);
                let c = ta.cols();
                let da = slot(grads, *a, ta.len());
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut da[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                }
            }
            Op::Reshape(a) => add_into(slot(grads, *a, g.len()), g),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let da = slot(grads, *a, n);
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }

    fn backprop_attention(&self, s: &AttentionSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (tq, tk, tv) = (self.value(s.q), self.value(s.k), self.value(s.v));
        let (c, n, heads) = (tq.rows(), tk.rows(), s.heads);
        let dk = tq.cols() / heads;
        let dv = tv.cols() / heads;
        let (wq, wv) = (tq.cols() as isize, tv.cols() as isize);
        let mut dq = vec![0.0; tq.len()];
        let mut dkk = vec![0.0; tk.len()];
        let mut dvv = vec![0.0; tv.len()];
        let mut dp = vec![0.0; c * n];
        for h in 0..heads {
            let p = &s.probs[h * c * n..(h + 1) * c * n];
            // SAFETY: all strided views stay within their buffers.
            unsafe {
                // dP = dO · Vᵀ
                gemm_strided(
                    c, dv, n, 1.0,
                    g.as_ptr().add(h * dv), wv, 1,
                    tv.data().as_ptr().add(h * dv), 1, wv,
                    dp.as_mut_ptr(), n as isize, 1, 0.0,
                );
                // dV += Pᵀ · dO
                gemm_strided(
                    n, c, dv, 1.0,
                    p.as_ptr(), 1, n as isize,
                    g.as_ptr().add(h * dv), wv, 1,
                    dvv.as_mut_ptr().add(h * dv), wv, 1, 1.0,
                );
            }
            for i in 0..c {
                let lim = if s.causal { s.offset + i + 1 } else { n };
                let pr = &p[i * n..i * n + lim];
                let dr = &mut dp[i * n..(i + 1) * n];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..lim {
                    dr[j] = pr[j] * (dr[j] - dot) * s.scale;
                }
                dr[lim..].iter_mut().for_each(|x| *x = 0.0);
            }
            unsafe {
                // dQ = dS · K
                gemm_strided(
                    c, n, dk, 1.0,
                    dp.as_ptr(), n as isize, 1,
                    tk.data().as_ptr().add(h * dk), wq, 1,
                    dq.as_mut_ptr().add(h * dk), wq, 1, 0.0,
                );
                // dK = dSᵀ · Q
                gemm_strided(
                    n, c, dk, 1.0,
                    dp.as_ptr(), 1, n as isize,
                    tq.data().as_ptr().add(h * dk), wq, 1,
                    dkk.as_mut_ptr().add(h * dk), wq, 1, 0.0,
                );
            }
        }
        for (v, d) in [(s.q, dq), (s.k, dkk), (s.v, dvv)] {
            if self.ng(v) {
                add_into(slot(grads, v, d.len()), &d);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// In-place stable softmax of a contiguous slice.
pub(crate) fn softmax_slice(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn softmax_strided(data: &mut [f64], outer: usize, len: usize, inner: usize) {
    if inner == 1 {
        for chunk in data.chunks_mut(len) {
            softmax_slice(chunk);
        }
        return;
    }
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for j in 0..inner {
            let base = o * len * inner + j;
            for t in 0..len {
                buf[t] = data[base + t * inner];
            }
            softmax_slice(&mut buf);
            for t in 0..len {
                data[base + t * inner] = buf[t];
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param => "param",
        Op::MatMul { .. } => "matmul",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Gelu(_) => "gelu",
        Op::Tanh(_) => "tanh",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax { .. } => "softmax",
        Op::Attention(_) => "attention",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::ConcatRows(_) => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::SelectRows { .. } => "select_rows",
        Op::Reshape(_) => "reshape",
        Op::Sum(_) => "sum",
    }
}
