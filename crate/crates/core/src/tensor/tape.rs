//! Reverse-mode tape.
//!
//! Every operation appends a node holding its output and enough saved state
//! for the vector-Jacobian product. `backward` walks the nodes in exact
//! reverse order of recording and returns gradients keyed by parameter name.

use std::collections::HashMap;
use std::sync::Arc;

use super::gemm::gemm;
use super::params::{Grads, Params};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How the rows of a token matrix group into attention sequences.
///
/// Position `p` of sequence `s` lives at row `bases[s] + p * stride`.
#[derive(Clone, Debug)]
pub struct SeqLayout {
    pub bases: Vec<usize>,
    pub len: usize,
    pub stride: usize,
    /// Optional key validity per `(sequence, position)`; invalid keys get no weight.
    pub key_mask: Option<Vec<bool>>,
}

impl SeqLayout {
    /// All `n` rows form one sequence.
    pub fn single(n: usize) -> Self {
        SeqLayout { bases: vec![0], len: n, stride: 1, key_mask: None }
    }

    /// Rows ordered `(batch, cell, step)`; one sequence per `(batch, cell)` running over steps.
    pub fn temporal(batch: usize, cells: usize, steps: usize) -> Self {
        let bases = (0..batch * cells).map(|s| s * steps).collect();
        SeqLayout { bases, len: steps, stride: 1, key_mask: None }
    }

    /// Rows ordered `(batch, cell, step)`; one sequence per `(batch, step)` running over cells.
    pub fn feature(batch: usize, cells: usize, steps: usize) -> Self {
        let mut bases = Vec::with_capacity(batch * steps);
        for b in 0..batch {
            for l in 0..steps {
                bases.push(b * cells * steps + l);
            }
        }
        SeqLayout { bases, len: cells, stride: steps, key_mask: None }
    }

    pub fn with_key_mask(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.bases.len() * self.len, "key mask size");
        self.key_mask = Some(mask);
        self
    }

    fn rows(&self) -> usize {
        self.bases.len() * self.len
    }

    #[inline]
    fn row(&self, s: usize, p: usize) -> usize {
        self.bases[s] + p * self.stride
    }

    #[inline]
    fn key_valid(&self, s: usize, p: usize) -> bool {
        self.key_mask.as_ref().is_none_or(|m| m[s * self.len + p])
    }
}

enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    AddBias { x: Var, b: Var, groups: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, layout: Arc<SeqLayout>, probs: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { table: Var, idx: Arc<Vec<usize>> },
    Reshape(Var),
    Sum(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    grad: bool,
}

/// Record of a forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a named parameter; repeated binds of one name return the same node.
    pub fn param(&mut self, p: &Params<'_>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = p
            .store
            .shared(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))?;
        self.nodes.push(Node { value, op: Op::Param(name.to_string()), grad: p.trainable });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(format!("{what} must be rank 2, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix(a, "matmul lhs")?;
        let (k2, m) = self.matrix(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner axes differ: lhs axis 1 = {k}, rhs axis 0 = {k2}"
            )));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let grad = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), grad))
    }

    /// Adds `b` (`[m]` or `[groups, m]`) to every row of `x`; with groups,
    /// consecutive blocks of `rows / groups` rows share one bias row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, m) = self.value(x).as_matrix_dims();
        let bs = self.shape(b).to_vec();
        let (groups, bm) = match bs.len() {
            1 => (1, bs[0]),
            2 => (bs[0], bs[1]),
            _ => return Err(Error::dim(format!("bias must be rank 1 or 2, got {bs:?}"))),
        };
        if bm != m {
            return Err(Error::dim(format!("bias width {bm} does not match input last axis {m}")));
        }
        if groups == 0 || rows % groups != 0 {
            return Err(Error::dim(format!("{rows} rows cannot split into {groups} bias groups")));
        }
        let per = rows / groups;
        let xv = self.value(x);
        let bv = self.value(b).data();
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(m).enumerate() {
            let brow = &bv[(r / per) * m..(r / per + 1) * m];
            row.iter_mut().zip(brow).for_each(|(o, b)| *o += b);
        }
        let shape = xv.shape().to_vec();
        let grad = self.needs(&[x, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias { x, b, groups }, grad))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let out: Vec<f64> =
            av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape().to_vec();
        let grad = self.needs(&[a, b]);
        self.push(Tensor { shape, data: out }, op, grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        let grad = self.needs(&[x]);
        self.push(t, Op::Scale(x, s), grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        let grad = self.needs(&[x]);
        self.push(t, op, grad)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()), Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (_, m) = xv.as_matrix_dims();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            softmax_in_place(row);
        }
        let shape = xv.shape().to_vec();
        let grad = self.needs(&[x]);
        self.push(Tensor { shape, data: out }, Op::Softmax(x), grad)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, m) = xv.as_matrix_dims();
        if self.value(gamma).len() != m || self.value(beta).len() != m {
            return Err(Error::dim(format!("layer norm affine params must have {m} entries")));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; rows * m];
        let mut xhat = vec![0.0; rows * m];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..m {
                let h = (row[j] - mean) * rs;
                xhat[r * m + j] = h;
                out[r * m + j] = g[j] * h + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        let grad = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            grad,
        ))
    }

    /// Multi-head scaled dot-product attention over the sequences in `layout`.
    ///
    /// `q`, `k`, `v` are `[rows, d]`; heads split the columns evenly and the
    /// per-head outputs are written back into their own column block.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<SeqLayout>,
    ) -> Result<Var> {
        let (rows, d) = self.matrix(q, "attention query")?;
        if self.shape(k) != [rows, d] || self.shape(v) != [rows, d] {
            return Err(Error::dim(format!(
                "attention q/k/v shapes differ: {:?} {:?} {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("model width {d} is not divisible by {heads} heads")));
        }
        if layout.rows() != rows || layout.len == 0 {
            return Err(Error::dim(format!(
                "attention layout covers {} rows but inputs have {rows}",
                layout.rows()
            )));
        }
        let dh = d / heads;
        let n = layout.len;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; layout.bases.len() * heads * n * n];
        let mut qs = vec![0.0; n * dh];
        let mut ks = vec![0.0; n * dh];
        let mut vs = vec![0.0; n * dh];
        let mut os = vec![0.0; n * dh];
        for s in 0..layout.bases.len() {
            for h in 0..heads {
                let c0 = h * dh;
                gather_head(qd, &layout, s, c0, d, dh, &mut qs);
                gather_head(kd, &layout, s, c0, d, dh, &mut ks);
                gather_head(vd, &layout, s, c0, d, dh, &mut vs);
                let pbase = (s * heads + h) * n * n;
                let pm = &mut probs[pbase..pbase + n * n];
                gemm(n, dh, n, &qs, false, &ks, true, pm, false);
                for prow in pm.chunks_mut(n) {
                    for (j, v) in prow.iter_mut().enumerate() {
                        *v = if layout.key_valid(s, j) { *v * scale } else { f64::NEG_INFINITY };
                    }
                    softmax_in_place(prow);
                }
                gemm(n, n, dh, pm, false, &vs, false, &mut os, false);
                scatter_head(&os, &layout, s, c0, d, dh, &mut out);
            }
        }
        let grad = self.needs(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::Attention { q, k, v, heads, layout, probs },
            grad,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.matrix(parts[0], "concat input")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix(p, "concat input")?;
            if r != rows {
                return Err(Error::dim(format!("concat inputs have {rows} and {r} rows on axis 0")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let grad = self.needs(parts);
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), grad))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "slice input")?;
        if start + len > cols {
            return Err(Error::dim(format!("column slice {start}..{} exceeds axis 1 of size {cols}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let grad = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![rows, len], out)?, Op::SliceCols { x, start }, grad))
    }

    /// Row lookup: `out[i] = table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (rows, d) = self.matrix(table, "gather table")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(format!("gather index {bad} out of range for axis 0 of size {rows}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let grad = self.needs(&[table]);
        let n = idx.len();
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::GatherRows { table, idx }, grad))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.nodes[x.0].value).clone().reshape(shape)?;
        let grad = self.needs(&[x]);
        Ok(self.push(t, Op::Reshape(x), grad))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let grad = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), grad)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Runs the reverse pass from a scalar `loss` and consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Grads> {
        let mut nodes = self.nodes;
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Grads::default();
        nodes.truncate(loss.0 + 1);

        for i in (0..nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.grad {
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => {
                    out.accumulate(name, Tensor { shape: y.shape().to_vec(), data: g });
                }
                Op::MatMul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    let (n, k) = (av.shape()[0], av.shape()[1]);
                    let m = bv.shape()[1];
                    if nodes[a.0].grad {
                        let ga = slot(&mut grads, *a, n * k);
                        gemm(n, m, k, &g, false, bv.data(), true, ga, true);
                    }
                    if nodes[b.0].grad {
                        let gb = slot(&mut grads, *b, k * m);
                        gemm(k, n, m, av.data(), true, &g, false, gb, true);
                    }
                }
                Op::AddBias { x, b, groups } => {
                    if nodes[x.0].grad {
                        add_into(slot(&mut grads, *x, g.len()), &g);
                    }
                    if nodes[b.0].grad {
                        let bl = nodes[b.0].value.len();
                        let m = bl / groups;
                        let per = g.len() / m / groups;
                        let gb = slot(&mut grads, *b, bl);
                        for (r, row) in g.chunks(m).enumerate() {
                            let o = (r / per) * m;
                            add_into(&mut gb[o..o + m], row);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if nodes[a.0].grad {
                        add_into(slot(&mut grads, *a, g.len()), &g);
                    }
                    if nodes[b.0].grad {
                        add_into(slot(&mut grads, *b, g.len()), &g);
                    }
                }
                Op::Sub(a, b) => {
                    if nodes[a.0].grad {
                        add_into(slot(&mut grads, *a, g.len()), &g);
                    }
                    if nodes[b.0].grad {
                        slot(&mut grads, *b, g.len()).iter_mut().zip(&g).for_each(|(o, v)| *o -= v);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if nodes[a.0].grad {
                        let ga = slot(&mut grads, *a, g.len());
                        for j in 0..g.len() {
                            ga[j] += g[j] * bv[j];
                        }
                    }
                    if nodes[b.0].grad {
                        let gb = slot(&mut grads, *b, g.len());
                        for j in 0..g.len() {
                            gb[j] += g[j] * av[j];
                        }
                    }
                }
                Op::Scale(x, s) => {
                    let gx = slot(&mut grads, *x, g.len());
                    gx.iter_mut().zip(&g).for_each(|(o, v)| *o += s * v);
                }
                Op::Tanh(x) => {
                    let gx = slot(&mut grads, *x, g.len());
                    for j in 0..g.len() {
                        let t = y.data()[j];
                        gx[j] += g[j] * (1.0 - t * t);
                    }
                }
                Op::Sigmoid(x) => {
                    let gx = slot(&mut grads, *x, g.len());
                    for j in 0..g.len() {
                        let s = y.data()[j];
                        gx[j] += g[j] * s * (1.0 - s);
                    }
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    let gx = slot(&mut grads, *x, g.len());
                    for j in 0..g.len() {
                        if xv[j] > 0.0 {
                            gx[j] += g[j];
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = nodes[x.0].value.data();
                    let gx = slot(&mut grads, *x, g.len());
                    for j in 0..g.len() {
                        let v = xv[j];
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gx[j] += g[j] * d;
                    }
                }
                Op::Silu(x) => {
                    let xv = nodes[x.0].value.data();
                    let gx = slot(&mut grads, *x, g.len());
                    for j in 0..g.len() {
                        let s = sigmoid(xv[j]);
                        gx[j] += g[j] * s * (1.0 + xv[j] * (1.0 - s));
                    }
                }
                Op::Softmax(x) => {
                    let (_, m) = y.as_matrix_dims();
                    let gx = slot(&mut grads, *x, g.len());
                    for ((yr, gr), xr) in
                        y.data().chunks(m).zip(g.chunks(m)).zip(gx.chunks_mut(m))
                    {
                        let dotp = dot(yr, gr);
                        for j in 0..m {
                            xr[j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let m = nodes[gamma.0].value.len();
                    let gam = nodes[gamma.0].value.data();
                    if nodes[gamma.0].grad {
                        let gg = slot(&mut grads, *gamma, m);
                        for (gr, hr) in g.chunks(m).zip(xhat.chunks(m)) {
                            for j in 0..m {
                                gg[j] += gr[j] * hr[j];
                            }
                        }
                    }
                    if nodes[beta.0].grad {
                        let gb = slot(&mut grads, *beta, m);
                        for gr in g.chunks(m) {
                            add_into(gb, gr);
                        }
                    }
                    if nodes[x.0].grad {
                        let gx = slot(&mut grads, *x, g.len());
                        let mut dh = vec![0.0; m];
                        for (r, (gr, hr)) in g.chunks(m).zip(xhat.chunks(m)).enumerate() {
                            for j in 0..m {
                                dh[j] = gr[j] * gam[j];
                            }
                            let mean_dh = dh.iter().sum::<f64>() / m as f64;
                            let mean_dhh = dot(&dh, hr) / m as f64;
                            let xr = &mut gx[r * m..(r + 1) * m];
                            for j in 0..m {
                                xr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                            }
                        }
                    }
                }
                Op::Attention { q, k, v, heads, layout, probs } => {
                    let (q, k, v) = (*q, *k, *v);
                    let d = y.shape()[1];
                    let dh = d / heads;
                    let n = layout.len;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let rows = y.shape()[0];
                    let mut gq = vec![0.0; rows * d];
                    let mut gk = vec![0.0; rows * d];
                    let mut gv = vec![0.0; rows * d];
                    let (qd, kd, vd) =
                        (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
                    let mut qs = vec![0.0; n * dh];
                    let mut ks = vec![0.0; n * dh];
                    let mut vs = vec![0.0; n * dh];
                    let mut gos = vec![0.0; n * dh];
                    let mut buf = vec![0.0; n * dh];
                    let mut ds = vec![0.0; n * n];
                    for s in 0..layout.bases.len() {
                        for h in 0..*heads {
                            let c0 = h * dh;
                            let pbase = (s * heads + h) * n * n;
                            let pm = &probs[pbase..pbase + n * n];
                            gather_head(&g, layout, s, c0, d, dh, &mut gos);
                            gather_head(vd, layout, s, c0, d, dh, &mut vs);
                            // dV = Pᵀ dO
                            gemm(n, n, dh, pm, true, &gos, false, &mut buf, false);
                            scatter_head(&buf, layout, s, c0, d, dh, &mut gv);
                            // dP = dO Vᵀ, then the softmax Jacobian row by row.
                            gemm(n, dh, n, &gos, false, &vs, true, &mut ds, false);
                            for (prow, drow) in pm.chunks(n).zip(ds.chunks_mut(n)) {
                                let sdot = dot(prow, drow);
                                for (dv, &pv) in drow.iter_mut().zip(prow) {
                                    *dv = pv * (*dv - sdot) * scale;
                                }
                            }
                            gather_head(kd, layout, s, c0, d, dh, &mut ks);
                            gather_head(qd, layout, s, c0, d, dh, &mut qs);
                            gemm(n, n, dh, &ds, false, &ks, false, &mut buf, false);
                            scatter_head(&buf, layout, s, c0, d, dh, &mut gq);
                            gemm(n, n, dh, &ds, true, &qs, false, &mut buf, false);
                            scatter_head(&buf, layout, s, c0, d, dh, &mut gk);
                        }
                    }
                    for (var, gbuf) in [(q, gq), (k, gk), (v, gv)] {
                        if nodes[var.0].grad {
                            add_into(slot(&mut grads, var, rows * d), &gbuf);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = y.shape()[1];
                    let rows = y.shape()[0];
                    let mut off = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.shape()[1];
                        if nodes[p.0].grad {
                            let gp = slot(&mut grads, p, rows * w);
                            for r in 0..rows {
                                add_into(
                                    &mut gp[r * w..(r + 1) * w],
                                    &g[r * total + off..r * total + off + w],
                                );
                            }
                        }
                        off += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let cols = nodes[x.0].value.shape()[1];
                    let rows = y.shape()[0];
                    let len = y.shape()[1];
                    let gx = slot(&mut grads, *x, rows * cols);
                    for r in 0..rows {
                        add_into(
                            &mut gx[r * cols + start..r * cols + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
                Op::GatherRows { table, idx } => {
                    let tl = nodes[table.0].value.len();
                    let d = y.shape()[1];
                    let gt = slot(&mut grads, *table, tl);
                    for (i, &row) in idx.iter().enumerate() {
                        add_into(&mut gt[row * d..(row + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
                Op::Reshape(x) => {
                    add_into(slot(&mut grads, *x, g.len()), &g);
                }
                Op::Sum(x) => {
                    let n = nodes[x.0].value.len();
                    slot(&mut grads, *x, n).iter_mut().for_each(|o| *o += g[0]);
                }
            }
        }
        Ok(out)
    }
}

/// Copies head columns `c0..c0+dh` of sequence `s` into a dense `[len, dh]` block.
fn gather_head(src: &[f64], layout: &SeqLayout, s: usize, c0: usize, d: usize, dh: usize, out: &mut [f64]) {
    for (p, o) in out.chunks_mut(dh).enumerate() {
        let r = layout.row(s, p) * d + c0;
        o.copy_from_slice(&src[r..r + dh]);
    }
}

/// Adds a dense `[len, dh]` block back into head columns of sequence `s`.
fn scatter_head(blk: &[f64], layout: &SeqLayout, s: usize, c0: usize, d: usize, dh: usize, dst: &mut [f64]) {
    for (p, b) in blk.chunks(dh).enumerate() {
        let r = layout.row(s, p) * d + c0;
        add_into(&mut dst[r..r + dh], b);
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Stable softmax; a row of all `-inf` becomes all zeros.
fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStore;

    #[test]
    fn linear_map_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_rows(&[&[0.5], &[-1.0]]));
        let p = store.trainable();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
        let w = tape.param(&p, "w").unwrap();
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn matmul_names_mismatched_axes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 1]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("axis 1 = 3") && err.contains("axis 0 = 4"), "{err}");
    }

    #[test]
    fn masked_keys_get_no_weight() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[&[1.0], &[1.0]]));
        let k = tape.constant(Tensor::from_rows(&[&[1.0], &[5.0]]));
        let v = tape.constant(Tensor::from_rows(&[&[3.0], &[100.0]]));
        let layout = Arc::new(SeqLayout::single(2).with_key_mask(vec![true, false]));
        let o = tape.attention(q, k, v, 1, layout).unwrap();
        assert_eq!(tape.value(o).data(), &[3.0, 3.0]);
    }

    #[test]
    fn layouts_cover_every_row_once() {
        let (b, k, l) = (2, 3, 4);
        for layout in [SeqLayout::temporal(b, k, l), SeqLayout::feature(b, k, l)] {
            let mut seen = vec![0; b * k * l];
            for s in 0..layout.bases.len() {
                for p in 0..layout.len {
                    seen[layout.row(s, p)] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }
}
