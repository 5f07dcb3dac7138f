//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and `backward` walks it once in reverse.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::ops;
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Gelu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        kept: usize,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push(value, op))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// A constant input with no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf(None))
    }

    /// Loads a parameter onto the tape; its gradient is reported by
    /// [`Graph::backward`]. Repeated loads of one id share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf(Some(id)));
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |p, q| p + q)?;
        self.push_checked(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |p, q| p - q)?;
        self.push_checked(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |p, q| p * q)?;
        self.push_checked(out, Op::Mul(a, b), "mul")
    }

    fn row_operand(&self, op: &'static str, x: Var, r: Var) -> Result<(usize, usize)> {
        let (m, n) = self.value(x).dims2(op)?;
        if self.value(r).len() != n {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(r).to_vec(),
            });
        }
        Ok((m, n))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (_, n) = self.row_operand("add_row", x, r)?;
        let rv = self.value(r).data();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += rv[i % n];
        }
        self.push_checked(out, Op::AddRow(x, r), "add_row")
    }

    /// Multiplies every row of an `m×n` matrix elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (_, n) = self.row_operand("mul_row", x, r)?;
        let rv = self.value(r).data();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= rv[i % n];
        }
        self.push_checked(out, Op::MulRow(x, r), "mul_row")
    }

    /// Scales row `i` of an `m×n` matrix by `c[i]`, where `c` has `m` entries.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("mul_col")?;
        if self.value(c).len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "mul_col",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(c).to_vec(),
            });
        }
        let cv = self.value(c).data();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= cv[i / n];
        }
        self.push_checked(out, Op::MulCol(x, c), "mul_col")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push_checked(out, Op::Scale(x, s), "scale")
    }

    /// Adds a constant tensor of the same shape (no gradient flows to it).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add_const",
                lhs: self.shape(x).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let mut out = self.value(x).clone();
        out.add_assign(c);
        self.push_checked(out, Op::AddConst(x), "add_const")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = ops::gelu(self.value(x))?;
        Ok(self.push(out, Op::Gelu(x)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push_checked(out, Op::Tanh(x), "tanh")
    }

    /// Softmax over the last axis of a matrix. Columns with a false `keep`
    /// flag receive zero probability.
    pub fn softmax_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let out = ops::softmax_rows_masked(self.value(x), keep)?;
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let ln = ops::layer_norm_cached(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push(
            ln.out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: ln.xhat,
                inv_std: ln.inv_std,
            },
        ))
    }

    /// Gathers rows of a `K×d` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (k, d) = self.value(table).dims2("embedding")?;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= k {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: i,
                    limit: k,
                });
            }
            out.extend_from_slice(self.value(table).row(i));
        }
        let out = Tensor::new(&[indices.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2("slice_cols")?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                limit: n,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let out = Tensor::new(&[m, len], out)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let (m, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2("concat_cols")?;
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Masked mean cross-entropy of `T×K` logits against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (_, k, kept) = ops::check_ce(lv, targets, mask)?;
        if !lv.is_finite() {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (i, (&y, &m)) in targets.iter().zip(mask).enumerate() {
            let row = &mut probs[i * k..(i + 1) * k];
            if m {
                total += ops::row_nll(row, y);
            }
            kernels::softmax_row(row, None);
        }
        let loss = Tensor::scalar(total / kept as f64);
        self.push_checked(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                kept,
            },
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push_checked(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        self.push_checked(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Reverse pass from a scalar node. Returns gradients of every parameter
    /// leaf that the output depends on.
    pub fn backward(&self, output: Var, store: &ParamStore) -> Result<Grads> {
        let mut grads = Grads::zeros_like(store);
        let adj = self.adjoints(output)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf(Some(id)), Some(g)) = (&node.op, &adj[i]) {
                grads.accumulate(*id, g);
            }
        }
        if !grads.is_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        Ok(grads)
    }

    /// Adjoint of every node with respect to a scalar output.
    pub fn adjoints(&self, output: Var) -> Result<Vec<Option<Tensor>>> {
        if self.value(output).len() != 1 {
            return Err(TensorError::Invalid(
                "backward requires a single-element output".into(),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::full(self.shape(output), 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(adj)
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(val(*a));
                let n = val(*b).shape()[1];
                let mut da = vec![0.0; m * k];
                kernels::matmul_nt_acc(g.data(), val(*b).data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                kernels::matmul_tn_acc(val(*a).data(), g.data(), &mut db, m, k, n);
                acc_data(adj, *a, val(*a).shape(), da);
                acc_data(adj, *b, val(*b).shape(), db);
            }
            Op::Add(a, b) => {
                acc(adj, *a, g);
                acc(adj, *b, g);
            }
            Op::Sub(a, b) => {
                acc(adj, *a, g);
                acc(adj, *b, &g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let da = zip(g, y, |p, q| p * q);
                let db = zip(g, x, |p, q| p * q);
                acc_data(adj, *a, x.shape(), da);
                acc_data(adj, *b, y.shape(), db);
            }
            Op::AddRow(x, r) => {
                acc(adj, *x, g);
                let n = val(*r).len();
                let mut dr = vec![0.0; n];
                for (j, v) in g.data().iter().enumerate() {
                    dr[j % n] += v;
                }
                acc_data(adj, *r, val(*r).shape(), dr);
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (val(*x), val(*r));
                let n = rv.len();
                let mut dx = vec![0.0; xv.len()];
                let mut dr = vec![0.0; n];
                for (j, (&gv, &xj)) in g.data().iter().zip(xv.data()).enumerate() {
                    dx[j] = gv * rv.data()[j % n];
                    dr[j % n] += gv * xj;
                }
                acc_data(adj, *x, xv.shape(), dx);
                acc_data(adj, *r, rv.shape(), dr);
            }
            Op::MulCol(x, c) => {
                let (xv, cv) = (val(*x), val(*c));
                let n = xv.shape()[1];
                let mut dx = vec![0.0; xv.len()];
                let mut dc = vec![0.0; cv.len()];
                for (j, (&gv, &xj)) in g.data().iter().zip(xv.data()).enumerate() {
                    dx[j] = gv * cv.data()[j / n];
                    dc[j / n] += gv * xj;
                }
                acc_data(adj, *x, xv.shape(), dx);
                acc_data(adj, *c, cv.shape(), dc);
            }
            Op::Scale(x, s) => acc(adj, *x, &g.map(|v| v * s)),
            Op::AddConst(x) => acc(adj, *x, g),
            Op::Gelu(x) => {
                let d = zip(g, val(*x), |gv, xv| gv * kernels::gelu_grad(xv));
                acc_data(adj, *x, val(*x).shape(), d);
            }
            Op::Tanh(x) => {
                let d = zip(g, &node.value, |gv, y| gv * (1.0 - y * y));
                acc_data(adj, *x, val(*x).shape(), d);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (m, n) = dims(y);
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let s = kernels::dot(yr, gr);
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - s);
                    }
                }
                acc_data(adj, *x, y.shape(), dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = dims(&node.value);
                let gv = val(*gain).data();
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let nf = n as f64;
                for r in 0..m {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        sum_d += dh;
                        sum_dh += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    let k = inv_std[r] / nf;
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        dx[r * n + j] = k * (nf * dh - sum_d - hr[j] * sum_dh);
                    }
                }
                acc_data(adj, *x, val(*x).shape(), dx);
                acc_data(adj, *gain, val(*gain).shape(), dgain);
                acc_data(adj, *bias, val(*bias).shape(), dbias);
            }
            Op::Embedding { table, indices } => {
                let tv = val(*table);
                let d = tv.shape()[1];
                let mut dt = vec![0.0; tv.len()];
                for (t, &ix) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[ix * d + j] += g.data()[t * d + j];
                    }
                }
                acc_data(adj, *table, tv.shape(), dt);
            }
            Op::Transpose(x) => {
                let gt = g.transpose().expect("rank 2");
                acc(adj, *x, &gt);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (m, n) = dims(xv);
                let w = g.shape()[1];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                acc_data(adj, *x, xv.shape(), dx);
            }
            Op::ConcatCols(parts) => {
                let (m, n) = dims(g);
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.shape()[1];
                    let mut dp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dp.extend_from_slice(&g.data()[r * n + offset..r * n + offset + w]);
                    }
                    acc_data(adj, p, pv.shape(), dp);
                    offset += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                kept,
            } => {
                let lv = val(*logits);
                let k = lv.shape()[1];
                let scale = g.item() / *kept as f64;
                let mut dl = vec![0.0; lv.len()];
                for (t, (&y, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..k {
                        dl[t * k + j] = probs[t * k + j] * scale;
                    }
                    dl[t * k + y] -= scale;
                }
                acc_data(adj, *logits, lv.shape(), dl);
            }
            Op::Sum(x) => {
                let xv = val(*x);
                acc(adj, *x, &Tensor::full(xv.shape(), g.item()));
            }
            Op::Mean(x) => {
                let xv = val(*x);
                acc(adj, *x, &Tensor::full(xv.shape(), g.item() / xv.len() as f64));
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect()
}

fn acc(adj: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    match &mut adj[v.0] {
        Some(t) => t.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn acc_data(adj: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut adj[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape, data).expect("adjoint shape")),
    }
}
