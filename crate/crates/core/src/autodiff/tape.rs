//! Recording tape for reverse-mode differentiation.
//!
//! Each primitive evaluates eagerly, appends a node holding its output and
//! whatever it needs for the backward rule, and returns a [`Var`] handle.
//! [`Tape::backward`] walks the nodes in exact reverse recording order.
//!
//! The tape also keeps a live-byte counter over every buffer it owns (node
//! values, gradient buffers, plus anything registered through
//! [`Tape::account_external`]) and its high-water mark.

use std::hash::Hasher;

use super::tensor::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    AddBias(Var, Var),
    Relu(Var),
    MaxPool {
        input: Var,
        /// Winning row per output cell, `usize::MAX` for empty groups.
        argmax: Vec<usize>,
    },
    FillRows {
        input: Var,
        fill: Var,
        rows: Vec<bool>,
    },
    Softmax(Var),
    Attention {
        query: Var,
        keys: Var,
        values: Var,
        weights: Vec<T>,
    },
    ConcatCols(Var, Var),
    CrossEntropy {
        logits: Var,
        class: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Result of a grouped max pool.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub out: Var,
    /// `groups × cols` winning row indices, `usize::MAX` where the group is empty.
    pub argmax: Vec<usize>,
    /// Per group: no rows carried this group id.
    pub empty: Vec<bool>,
}

/// Result of single-query attention.
#[derive(Debug, Clone)]
pub struct Attended<T> {
    pub out: Var,
    pub weights: Vec<T>,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    live_bytes: usize,
    peak_live_bytes: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every differentiable leaf after a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn bytes_of<T>(n: usize) -> usize {
    n * std::mem::size_of::<T>()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), live_bytes: 0, peak_live_bytes: 0 }
    }

    /// Drop every node and reset the byte counters.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.live_bytes = 0;
        self.peak_live_bytes = 0;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn live_bytes(&self) -> usize {
        self.live_bytes
    }

    pub fn peak_live_bytes(&self) -> usize {
        self.peak_live_bytes
    }

    fn grow(&mut self, bytes: usize) {
        self.live_bytes += bytes;
        self.peak_live_bytes = self.peak_live_bytes.max(self.live_bytes);
    }

    fn shrink(&mut self, bytes: usize) {
        self.live_bytes -= bytes;
    }

    /// Count buffers the tape does not own (e.g. optimizer moments).
    pub fn account_external(&mut self, bytes: usize) {
        self.grow(bytes);
    }

    pub fn release_external(&mut self, bytes: usize) {
        self.shrink(bytes.min(self.live_bytes));
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        self.grow(value.bytes());
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| shape_err(op, format!("expected a 1-D or 2-D tensor, got {:?}", self.value(v).shape)))
    }

    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, &self.value(a).data, false, &self.value(b).data, false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg, "matmul")
    }

    /// Row-broadcast bias add: `[m×n] + [n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "add_bias")?;
        let bias_len = self.value(bias).len();
        if bias_len != n {
            return Err(shape_err("add_bias", format!("[{m}x{n}] + [{bias_len}]")));
        }
        let mut out = self.value(a).data.clone();
        let b = &self.value(bias).data;
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let shape = self.value(a).shape.clone();
        let rg = self.rg(a) || self.rg(bias);
        self.push(Tensor { shape, data: out }, Op::AddBias(a, bias), rg, "add_bias")
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let data = src.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = src.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::Relu(a), rg, "relu")
    }

    /// Per-group column-wise max over rows of `features [N×D]`.
    ///
    /// Output row `g` holds the max over rows whose id is `g`; empty groups
    /// get zeros and are flagged. Ties go to the lowest row index, and the
    /// backward rule routes each output gradient to its winning row only.
    pub fn masked_max_pool(&mut self, features: Var, group_ids: &[usize], groups: usize) -> Result<Pooled> {
        let (n, d) = self.dims(features, "masked_max_pool")?;
        if n == 0 {
            return Err(shape_err("masked_max_pool", "no rows".into()));
        }
        if group_ids.len() != n {
            return Err(shape_err("masked_max_pool", format!("{} group ids for {n} rows", group_ids.len())));
        }
        if let Some(bad) = group_ids.iter().find(|&&g| g >= groups) {
            return Err(Error::InvalidInput(format!("group id {bad} outside 0..{groups}")));
        }
        let x = &self.value(features).data;
        let mut out = vec![T::zero(); groups * d];
        let mut argmax = vec![usize::MAX; groups * d];
        for (i, row) in x.chunks_exact(d).enumerate() {
            let g = group_ids[i];
            let base = g * d;
            for (j, &v) in row.iter().enumerate() {
                let cell = base + j;
                if argmax[cell] == usize::MAX || v > out[cell] {
                    out[cell] = v;
                    argmax[cell] = i;
                }
            }
        }
        let empty = (0..groups).map(|g| d == 0 || argmax[g * d] == usize::MAX).collect();
        let rg = self.rg(features);
        let out = self.push(
            Tensor { shape: vec![groups, d], data: out },
            Op::MaxPool { input: features, argmax: argmax.clone() },
            rg,
            "masked_max_pool",
        )?;
        Ok(Pooled { out, argmax, empty })
    }

    /// Replace the flagged rows of `input [G×D]` with the vector `fill [D]`.
    pub fn fill_rows(&mut self, input: Var, fill: Var, rows: &[bool]) -> Result<Var> {
        let (g, d) = self.dims(input, "fill_rows")?;
        if rows.len() != g || self.value(fill).len() != d {
            return Err(shape_err("fill_rows", format!("[{g}x{d}] with {} flags, fill of {}", rows.len(), self.value(fill).len())));
        }
        let mut out = self.value(input).data.clone();
        let f = &self.value(fill).data;
        for (r, &flag) in rows.iter().enumerate() {
            if flag {
                out[r * d..(r + 1) * d].copy_from_slice(f);
            }
        }
        let rg = self.rg(input) || self.rg(fill);
        self.push(
            Tensor { shape: vec![g, d], data: out },
            Op::FillRows { input, fill, rows: rows.to_vec() },
            rg,
            "fill_rows",
        )
    }

    /// Max-subtracted softmax over all elements.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.is_empty() {
            return Err(shape_err("softmax", "empty input".into()));
        }
        let data = softmax(&src.data);
        let shape = src.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::Softmax(a), rg, "softmax")
    }

    /// `softmax(q·Kᵀ / sqrt(D)) · V` for one query row.
    pub fn scaled_dot_attention(&mut self, query: Var, keys: Var, values: Var) -> Result<Attended<T>> {
        let (qr, d) = self.dims(query, "attention")?;
        let (g, kd) = self.dims(keys, "attention")?;
        let (vg, vd) = self.dims(values, "attention")?;
        if qr != 1 || kd != d || vg != g || d == 0 || g == 0 {
            return Err(shape_err(
                "attention",
                format!("query [{qr}x{d}], keys [{g}x{kd}], values [{vg}x{vd}]"),
            ));
        }
        let scale = T::from_f64_lossy(1.0 / (d as f64).sqrt());
        let q = &self.value(query).data;
        let k = &self.value(keys).data;
        let scores: Vec<T> = k.chunks_exact(d).map(|row| dot(q, row) * scale).collect();
        let weights = softmax(&scores);
        let mut out = vec![T::zero(); vd];
        gemm(1, g, vd, &weights, false, &self.value(values).data, false, &mut out, false);
        let rg = self.rg(query) || self.rg(keys) || self.rg(values);
        let out = self.push(
            Tensor { shape: vec![1, vd], data: out },
            Op::Attention { query, keys, values, weights: weights.clone() },
            rg,
            "attention",
        )?;
        Ok(Attended { out, weights })
    }

    /// Join `[r×a]` and `[r×b]` into `[r×(a+b)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a, "concat_cols")?;
        let (rb, cb) = self.dims(b, "concat_cols")?;
        if ra != rb {
            return Err(shape_err("concat_cols", format!("[{ra}x{ca}] with [{rb}x{cb}]")));
        }
        let (da, db) = (&self.value(a).data, &self.value(b).data);
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor { shape: vec![ra, ca + cb], data: out }, Op::ConcatCols(a, b), rg, "concat_cols")
    }

    /// `-log softmax(logits)[class]`, evaluated in log space.
    pub fn cross_entropy(&mut self, logits: Var, class: usize) -> Result<Var> {
        let z = &self.value(logits).data;
        if class >= z.len() {
            return Err(Error::InvalidInput(format!("class {class} out of range for {} logits", z.len())));
        }
        // log-sum-exp = max + ln(1 + sum over the non-max terms), which keeps
        // tiny losses accurate
        let top = (0..z.len()).fold(0, |best, i| if z[i] > z[best] { i } else { best });
        let max = z[top];
        let rest = z
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != top)
            .fold(T::zero(), |acc, (_, &v)| acc + (v - max).exp());
        let log_sum = max + rest.ln_1p();
        let loss = (max - z[class]) + rest.ln_1p();
        let probs = z.iter().map(|&v| (v - log_sum).exp()).collect();
        let rg = self.rg(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, class, probs }, rg, "cross_entropy")
    }

    /// Hash of every data-dependent branch taken so far: ReLU on/off
    /// pattern and max-pool winners. Two evaluations with equal patterns
    /// lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(input) => {
                    for (i, &v) in self.value(*input).data.iter().enumerate() {
                        if v > T::zero() {
                            h.write_usize(i);
                        }
                    }
                    h.write_u8(0xff);
                }
                Op::MaxPool { argmax, .. } => {
                    for &a in argmax {
                        h.write_usize(a);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Smallest |pre-activation| over every ReLU input on the tape.
    pub fn min_relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(input) => Some(self.value(input)),
                _ => None,
            })
            .flat_map(|t| t.data.iter().map(|v| v.as_f64().abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Reverse pass from a scalar `loss`. Returns gradients of every
    /// differentiable leaf; intermediate gradients are freed as soon as
    /// they have been propagated.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss has shape {:?}", self.value(loss).shape)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        self.grow(bytes_of::<T>(1));
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(upstream);
                continue;
            }
            self.propagate(idx, &upstream, &mut grads);
            self.shrink(bytes_of::<T>(upstream.len()));
        }
        Ok(Gradients { grads })
    }

    /// Accumulate into the gradient buffer of `v`, allocating it on first use.
    fn acc<'g>(&mut self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let n = self.nodes[v.0].value.len();
            self.grow(bytes_of::<T>(n));
            *slot = Some(vec![T::zero(); n]);
        }
        slot.as_mut()
    }

    fn propagate(&mut self, idx: usize, up: &[T], grads: &mut [Option<Vec<T>>]) {
        // The op is moved out for the duration of the rule so that node
        // values can be borrowed alongside the gradient buffers.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (_, n) = self.value(*b).dims2().unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, up, false, &self.value(*b).data, true, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, &self.value(*a).data, true, up, false, gb, true);
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (g, &u) in ga.iter_mut().zip(up) {
                        *g = *g + u;
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    let n = gb.len();
                    for row in up.chunks_exact(n) {
                        for (g, &u) in gb.iter_mut().zip(row) {
                            *g = *g + u;
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((g, &u), &xv) in ga.iter_mut().zip(up).zip(&self.value(*a).data) {
                        if xv > T::zero() {
                            *g = *g + u;
                        }
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                let d = self.value(*input).dims2().unwrap().1;
                if let Some(gi) = self.acc(grads, *input) {
                    for (cell, &row) in argmax.iter().enumerate() {
                        if row != usize::MAX {
                            let j = cell % d;
                            gi[row * d + j] = gi[row * d + j] + up[cell];
                        }
                    }
                }
            }
            Op::FillRows { input, fill, rows } => {
                let d = self.value(*fill).len();
                if let Some(gi) = self.acc(grads, *input) {
                    for (r, &flag) in rows.iter().enumerate() {
                        if !flag {
                            for j in 0..d {
                                gi[r * d + j] = gi[r * d + j] + up[r * d + j];
                            }
                        }
                    }
                }
                if let Some(gf) = self.acc(grads, *fill) {
                    for (r, &flag) in rows.iter().enumerate() {
                        if flag {
                            for j in 0..d {
                                gf[j] = gf[j] + up[r * d + j];
                            }
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let y = &self.nodes[idx].value.data;
                    let s = dot(up, y);
                    for ((g, &u), &yv) in ga.iter_mut().zip(up).zip(y) {
                        *g = *g + yv * (u - s);
                    }
                }
            }
            Op::Attention { query, keys, values, weights } => {
                let (g, d) = self.value(*keys).dims2().unwrap();
                let vd = self.value(*values).dims2().unwrap().1;
                let scale = T::from_f64_lossy(1.0 / (d as f64).sqrt());
                let q = self.value(*query).data.clone();
                let k = self.value(*keys).data.clone();
                let v = self.value(*values).data.clone();
                if let Some(gv) = self.acc(grads, *values) {
                    for (row, &w) in gv.chunks_exact_mut(vd).zip(weights) {
                        for (gx, &u) in row.iter_mut().zip(up) {
                            *gx = *gx + w * u;
                        }
                    }
                }
                let dw: Vec<T> = v.chunks_exact(vd).map(|row| dot(up, row)).collect();
                let s = dot(&dw, weights);
                let dscore: Vec<T> = dw.iter().zip(weights).map(|(&dwi, &w)| w * (dwi - s) * scale).collect();
                if let Some(gq) = self.acc(grads, *query) {
                    for (row, &ds) in k.chunks_exact(d).zip(&dscore) {
                        for (gx, &kv) in gq.iter_mut().zip(row) {
                            *gx = *gx + ds * kv;
                        }
                    }
                }
                if let Some(gk) = self.acc(grads, *keys) {
                    for (row, &ds) in gk.chunks_exact_mut(d).zip(&dscore) {
                        for (gx, &qv) in row.iter_mut().zip(&q) {
                            *gx = *gx + ds * qv;
                        }
                    }
                }
                debug_assert_eq!(dscore.len(), g);
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = self.value(*a).dims2().unwrap();
                let cb = self.value(*b).dims2().unwrap().1;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..ca {
                            ga[i * ca + j] = ga[i * ca + j] + up[i * (ca + cb) + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..r {
                        for j in 0..cb {
                            gb[i * cb + j] = gb[i * cb + j] + up[i * (ca + cb) + ca + j];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, class, probs } => {
                let u = up[0];
                if let Some(gl) = self.acc(grads, *logits) {
                    for (c, (g, &p)) in gl.iter_mut().zip(probs).enumerate() {
                        let target = if c == *class { T::one() } else { T::zero() };
                        *g = *g + u * (p - target);
                    }
                }
            }
        }
        self.nodes[idx].op = op;
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}
