// SPDX-License-Identifier: MIT OR Apache-2.0

//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value, so node inputs
//! always precede the node and the construction order is a topological
//! order. [`Graph::backward`] walks nodes in exact reverse construction
//! order, starting at the root, and only visits nodes that (transitively)
//! depend on a leaf with `requires_grad`.

use super::kernels;
use super::tensor::DTensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction applied by [`Graph::cross_entropy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f64, f64)>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Transpose(Var),
    AddAtRow {
        x: Var,
        row: usize,
        delta: Var,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        reduction: Reduction,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: DTensor,
    needs_grad: bool,
}

/// Per-graph tape. Rebuilt for every forward pass.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: DTensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a leaf; it participates in differentiation iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: DTensor) -> Var {
        let needs = tensor.requires_grad();
        self.push(Op::Leaf, tensor, needs)
    }

    /// Insert a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: DTensor) -> Var {
        let t = tensor.with_requires_grad(false);
        self.push(Op::Leaf, t, false)
    }

    pub fn value(&self, v: Var) -> &DTensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Operations
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        let t = DTensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), t, needs))
    }

    fn zip_op(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<DTensor> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        DTensor::new(self.value(a).shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), t, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), t, needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), t, needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|x| x * s).collect();
        let t = DTensor::new(src.shape().to_vec(), data).expect("scale keeps shape");
        let needs = self.needs(a);
        self.push(Op::Scale(a, s), t, needs)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Op::Sum(a), DTensor::scalar(s), needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            kernels::softmax_row(&src.data()[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let t = DTensor::new(src.shape().to_vec(), out)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Softmax(a), t, needs))
    }

    /// Row-wise layer normalization with gain and bias vectors.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        for p in [gain, bias] {
            if self.value(p).numel() != c {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.value(x).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let mut out = vec![0.0; r * c];
        let mut stats = Vec::with_capacity(r);
        {
            let xs = self.value(x).data();
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            for i in 0..r {
                stats.push(kernels::layer_norm_row(
                    &xs[i * c..(i + 1) * c],
                    g,
                    b,
                    LAYER_NORM_EPS,
                    &mut out[i * c..(i + 1) * c],
                ));
            }
        }
        let t = DTensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            t,
            needs,
        ))
    }

    /// Tanh-form GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| kernels::gelu(x)).collect();
        let t = DTensor::new(src.shape().to_vec(), data).expect("gelu keeps shape");
        let needs = self.needs(a);
        self.push(Op::Gelu(a), t, needs)
    }

    /// Rows of `table` selected by token ids.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table)?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::OutOfRange(format!(
                "token id {bad} outside vocabulary of size {v}"
            )));
        }
        let t = self.gather(table, ids, d)?;
        let needs = self.needs(table);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            t,
            needs,
        ))
    }

    fn gather(&self, x: Var, rows: &[usize], d: usize) -> Result<DTensor> {
        if rows.is_empty() {
            return Err(Error::Contract("gather of zero rows".into()));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        DTensor::new(vec![rows.len(), d], out)
    }

    /// Arbitrary row selection (a generalized slice along axis 0).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, d) = self.dims(x)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::OutOfRange(format!("row {bad} of {r}")));
        }
        let t = self.gather(x, rows, d)?;
        let needs = self.needs(x);
        Ok(self.push(
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            t,
            needs,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        if start >= end {
            return Err(Error::Contract(format!("empty row slice {start}..{end}")));
        }
        let rows: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &rows)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if start >= end || end > c {
            return Err(Error::OutOfRange(format!("column slice {start}..{end} of {c}")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let t = DTensor::new(vec![r, w], out)?;
        let needs = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start }, t, needs))
    }

    /// Concatenate matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of no inputs".into()))?;
        let (r0, c0) = self.dims(first)?;
        let mut dims = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (r, c) = self.dims(v)?;
            let ok = match axis {
                0 => c == c0,
                1 => r == r0,
                _ => return Err(Error::Contract(format!("concat axis {axis} unsupported"))),
            };
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
            dims.push((r, c));
        }
        let t = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(rows * c0);
            for &v in inputs {
                out.extend_from_slice(self.value(v).data());
            }
            DTensor::new(vec![rows, c0], out)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for (&v, &(_, c)) in inputs.iter().zip(&dims) {
                    out.extend_from_slice(&self.value(v).data()[i * c..(i + 1) * c]);
                }
            }
            DTensor::new(vec![r0, cols], out)?
        };
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            t,
            needs,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = DTensor::new(vec![c, r], out)?;
        let needs = self.needs(a);
        Ok(self.push(Op::Transpose(a), t, needs))
    }

    /// Copy of `x` with `delta` added to row `row` (a residual-stream hook).
    pub fn add_at_row(&mut self, x: Var, row: usize, delta: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if row >= r {
            return Err(Error::OutOfRange(format!("hook row {row} of {r}")));
        }
        if self.value(delta).numel() != c {
            return Err(Error::Shape {
                op: "add_at_row",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(delta).shape().to_vec(),
            });
        }
        let mut out = self.value(x).data().to_vec();
        for (o, &d) in out[row * c..(row + 1) * c].iter_mut().zip(self.value(delta).data()) {
            *o += d;
        }
        let t = DTensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(delta);
        Ok(self.push(Op::AddAtRow { x, row, delta }, t, needs))
    }

    /// Multi-head causal self-attention on already-projected `q`, `k`, `v`
    /// (each `[T × d]`, heads laid out as contiguous column blocks).
    /// Query row `t` attends to key rows `0..=t`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
        let (t_len, d) = self.dims(q)?;
        for other in [k, v] {
            if self.dims(other)? != (t_len, d) {
                return Err(Error::Shape {
                    op: "causal_attention",
                    lhs: self.value(q).shape().to_vec(),
                    rhs: self.value(other).shape().to_vec(),
                });
            }
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Contract(format!("d={d} not divisible by {n_heads} heads")));
        }
        let hd = d / n_heads;
        let mut out = vec![0.0; t_len * d];
        let mut probs = vec![0.0; n_heads * t_len * t_len];
        {
            let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for h in 0..n_heads {
                let col = h * hd;
                for t in 0..t_len {
                    let base = (h * t_len + t) * t_len;
                    kernels::attend_row(
                        &qs[t * d + col..t * d + col + hd],
                        ks,
                        vs,
                        d,
                        col,
                        t,
                        &mut probs[base..base + t_len],
                        &mut out[t * d + col..t * d + col + hd],
                    );
                }
            }
        }
        let tensor = DTensor::new(vec![t_len, d], out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                probs,
            },
            tensor,
            needs,
        ))
    }

    /// Negative log-likelihood of `targets = [(row, token id)]` under the
    /// softmax of the logits rows. `Mean` divides by the number of targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)], reduction: Reduction) -> Result<Var> {
        let (r, v) = self.dims(logits)?;
        if targets.is_empty() {
            return Err(Error::Contract("cross_entropy over zero targets".into()));
        }
        let src = self.value(logits).data();
        let mut total = 0.0;
        for &(row, id) in targets {
            if row >= r {
                return Err(Error::OutOfRange(format!("logit row {row} of {r}")));
            }
            if id >= v {
                return Err(Error::OutOfRange(format!(
                    "target id {id} outside vocabulary of size {v}"
                )));
            }
            let x = &src[row * v..(row + 1) * v];
            total += kernels::log_sum_exp(x) - x[id];
        }
        if reduction == Reduction::Mean {
            total /= targets.len() as f64;
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                reduction,
            },
            DTensor::scalar(total),
            needs,
        ))
    }

    // ------------------------------------------------------------------
    // Differentiation
    // ------------------------------------------------------------------

    /// Reverse pass from a scalar root, accumulating into the gradient
    /// slot of every reachable leaf with `requires_grad`. Repeated calls
    /// accumulate until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let grads = self.propagate(root)?;
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[idx].op, Op::Leaf) && self.nodes[idx].needs_grad {
                    self.nodes[idx].value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    /// Gradients of a scalar root with respect to `wrt`, without touching
    /// the stored gradient slots. Unreached inputs get zeros.
    pub fn gradients(&self, root: Var, wrt: &[Var]) -> Result<Vec<Vec<f64>>> {
        let mut grads = self.propagate(root)?;
        Ok(wrt
            .iter()
            .map(|&v| {
                grads
                    .get_mut(v.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; self.value(v).numel()])
            })
            .collect())
    }

    fn propagate(&self, root: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if root.0 >= self.nodes.len() {
            return Err(Error::OutOfRange(format!("root node {}", root.0)));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].needs_grad {
            return Ok(grads);
        }
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
        }
        Ok(grads)
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("rank checked");
                let (_, n) = self.value(*b).dims2().expect("rank checked");
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::matmul_nt_acc(g, bv, m, k, n, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(av, g, m, k, n, gb);
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Softmax(a) => {
                let (r, c) = node.value.dims2().expect("rank checked");
                let y = node.value.data();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let s = kernels::dot(yr, gr);
                        for j in 0..c {
                            ga[i * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let (r, c) = self.value(*x).dims2().expect("rank checked");
                let xs = self.value(*x).data();
                let gamma = self.value(*gain).data();
                let mut xhat = vec![0.0; c];
                let mut gxhat = vec![0.0; c];
                let need_x = self.nodes[x.0].needs_grad;
                let need_gain = self.nodes[gain.0].needs_grad;
                let need_bias = self.nodes[bias.0].needs_grad;
                let mut g_gain = vec![0.0; if need_gain { c } else { 0 }];
                let mut g_bias = vec![0.0; if need_bias { c } else { 0 }];
                let mut g_x = vec![0.0; if need_x { r * c } else { 0 }];
                for i in 0..r {
                    let (mean, inv_std) = stats[i];
                    let xr = &xs[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    for j in 0..c {
                        xhat[j] = (xr[j] - mean) * inv_std;
                        gxhat[j] = gr[j] * gamma[j];
                    }
                    if need_gain {
                        for j in 0..c {
                            g_gain[j] += gr[j] * xhat[j];
                        }
                    }
                    if need_bias {
                        for j in 0..c {
                            g_bias[j] += gr[j];
                        }
                    }
                    if need_x {
                        let n = c as f64;
                        let mean_g = gxhat.iter().sum::<f64>() / n;
                        let mean_gx = kernels::dot(&gxhat, &xhat) / n;
                        for j in 0..c {
                            g_x[i * c + j] = inv_std * (gxhat[j] - mean_g - xhat[j] * mean_gx);
                        }
                    }
                }
                for (v, contrib) in [(*x, g_x), (*gain, g_gain), (*bias, g_bias)] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Gelu(a) => {
                let xs = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * kernels::gelu_grad(xs[i]);
                    }
                }
            }
            Op::Embedding { table: x, ids: rows } | Op::GatherRows { x, rows } => {
                let (_, d) = node.value.dims2().expect("rank checked");
                if let Some(gx) = self.slot(grads, *x) {
                    for (t, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            gx[r * d + j] += g[t * d + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (r, w) = node.value.dims2().expect("rank checked");
                let (_, c) = self.value(*x).dims2().expect("rank checked");
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..w {
                            gx[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (_, total_c) = node.value.dims2().expect("rank checked");
                let mut offset = 0;
                for &v in inputs {
                    let (r, c) = self.value(v).dims2().expect("rank checked");
                    if let Some(gv) = self.slot(grads, v) {
                        if *axis == 0 {
                            for (a, b) in gv.iter_mut().zip(&g[offset * c..(offset + r) * c]) {
                                *a += b;
                            }
                        } else {
                            for i in 0..r {
                                for j in 0..c {
                                    gv[i * c + j] += g[i * total_c + offset + j];
                                }
                            }
                        }
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().expect("rank checked");
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::AddAtRow { x, row, delta } => {
                let (_, c) = node.value.dims2().expect("rank checked");
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gd) = self.slot(grads, *delta) {
                    gd.iter_mut()
                        .zip(&g[row * c..(row + 1) * c])
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *n_heads, probs, grads),
            Op::CrossEntropy {
                logits,
                targets,
                reduction,
            } => {
                let (_, vsz) = self.value(*logits).dims2().expect("rank checked");
                let xs = self.value(*logits).data();
                let w = match reduction {
                    Reduction::Mean => g[0] / targets.len() as f64,
                    Reduction::Sum => g[0],
                };
                if let Some(gl) = self.slot(grads, *logits) {
                    let mut p = vec![0.0; vsz];
                    for &(row, id) in targets {
                        kernels::softmax_row(&xs[row * vsz..(row + 1) * vsz], &mut p);
                        p[id] -= 1.0;
                        for (a, b) in gl[row * vsz..(row + 1) * vsz].iter_mut().zip(&p) {
                            *a += w * b;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (t_len, d) = self.value(q).dims2().expect("rank checked");
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let need = [q, k, v].map(|x| self.nodes[x.0].needs_grad);
        let mut gq = vec![0.0; t_len * d];
        let mut gk = vec![0.0; t_len * d];
        let mut gv = vec![0.0; t_len * d];
        let mut dp = vec![0.0; t_len];
        for h in 0..n_heads {
            let col = h * hd;
            for t in 0..t_len {
                let p = &probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                let go = &g[t * d + col..t * d + col + hd];
                let mut s = 0.0;
                for j in 0..=t {
                    let vr = &vs[j * d + col..j * d + col + hd];
                    dp[j] = kernels::dot(go, vr);
                    s += p[j] * dp[j];
                    if need[2] {
                        for c in 0..hd {
                            gv[j * d + col + c] += p[j] * go[c];
                        }
                    }
                }
                for j in 0..=t {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    if need[0] {
                        for c in 0..hd {
                            gq[t * d + col + c] += ds * ks[j * d + col + c];
                        }
                    }
                    if need[1] {
                        for c in 0..hd {
                            gk[j * d + col + c] += ds * qs[t * d + col + c];
                        }
                    }
                }
            }
        }
        for (x, contrib) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(gx) = self.slot(grads, x) {
                gx.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b);
            }
        }
    }
}
