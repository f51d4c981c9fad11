//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends a node holding its output value and
//! the handles of its inputs. [`Tape::backward`] walks the nodes once, newest
//! first, and applies each node's local vector-Jacobian product.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::{self, gemm, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Regression penalty applied elementwise to `prediction - target`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regression {
    /// `0.5 d^2` when `|d| < 1`, `|d| - 0.5` otherwise.
    SmoothL1,
    L1,
    /// `0.5 d^2`.
    L2,
}

impl Regression {
    pub fn value(self, d: f64) -> f64 {
        match self {
            Regression::SmoothL1 => {
                if d.abs() < 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                }
            }
            Regression::L1 => d.abs(),
            Regression::L2 => 0.5 * d * d,
        }
    }

    pub fn derivative(self, d: f64) -> f64 {
        match self {
            Regression::SmoothL1 => {
                if d.abs() < 1.0 {
                    d
                } else {
                    d.signum()
                }
            }
            Regression::L1 => {
                if d == 0.0 {
                    0.0
                } else {
                    d.signum()
                }
            }
            Regression::L2 => d,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LogEps(Var, f64),
    Sum(Var),
    Mean(Var),
    SumScalars(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    AddBias(Var, Var),
    CropSeq {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    StackSeq(Vec<Var>),
    BatchScores {
        query: Var,
        keys: Var,
    },
    BatchWeightedSum {
        weights: Var,
        keys: Var,
    },
    RowSelect {
        mask: Vec<bool>,
        on: Var,
        off: Var,
    },
    Cosine {
        a: Var,
        b: Var,
        eps: f64,
    },
    Gather {
        x: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    Regress {
        x: Var,
        target: Tensor,
        kind: Regression,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::LogEps(..) => "log",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumScalars(_) => "sum_scalars",
            Op::ConcatCols(_) => "concat",
            Op::SliceCols { .. } => "slice",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Embedding { .. } => "embedding",
            Op::ConvTranspose { .. } => "conv_transpose1d",
            Op::AddBias(..) => "add_bias",
            Op::CropSeq { .. } => "crop",
            Op::Reshape(_) => "reshape",
            Op::StackSeq(_) => "stack",
            Op::BatchScores { .. } => "attention_scores",
            Op::BatchWeightedSum { .. } => "attention_context",
            Op::RowSelect { .. } => "row_select",
            Op::Cosine { .. } => "cosine",
            Op::Gather { .. } => "gather",
            Op::Regress { .. } => "regression",
        }
    }
}

/// Names accepted by [`Tape::break_rule`].
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "sigmoid",
    "relu",
    "log",
    "sum",
    "mean",
    "sum_scalars",
    "concat",
    "slice",
    "softmax",
    "log_softmax",
    "embedding",
    "conv_transpose1d",
    "add_bias",
    "crop",
    "reshape",
    "stack",
    "attention_scores",
    "attention_context",
    "row_select",
    "cosine",
    "gather",
    "regression",
];

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    broken: Option<&'static str>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` when `v` does not influence the loss
    /// or does not require gradients.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        assert_eq!(v.tape, self.tape, "var from another tape");
        self.grads[v.index]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.index], g.clone()).expect("grad shape"))
    }

    pub(crate) fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.index].as_deref()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn col_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in g.chunks(cols) {
        add_into(&mut out, row);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            broken: None,
        }
    }

    /// Test hook: corrupts the backward rule of the named op so gradient checks
    /// have a negative control.
    pub fn break_rule(&mut self, op: &str) -> Result<()> {
        let name = OP_NAMES
            .iter()
            .find(|&&n| n == op)
            .ok_or_else(|| Error::Config(format!("unknown op {op:?}")))?;
        self.broken = Some(name);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) {
        assert_eq!(v.tape, self.id, "var belongs to another tape");
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v);
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v);
        self.nodes[v.index].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.index].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            index: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::LogEps(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Reshape(a) => vec![*a],
            Op::SliceCols { x, .. } | Op::CropSeq { x, .. } | Op::Gather { x, .. } | Op::Regress { x, .. } => {
                vec![*x]
            }
            Op::SumScalars(v) | Op::ConcatCols(v) | Op::StackSeq(v) => v.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::ConvTranspose { x, w, .. } => vec![*x, *w],
            Op::BatchScores { query, keys } => vec![*query, *keys],
            Op::BatchWeightedSum { weights, keys } => vec![*weights, *keys],
            Op::RowSelect { on, off, .. } => vec![*on, *off],
            Op::Cosine { a, b, .. } => vec![*a, *b],
        }
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a trainable parameter value.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(value, Op::Param(id))
    }

    /// Records an input that gradients should be reported for, without
    /// belonging to a parameter store.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param(ParamId::DETACHED))
    }

    /// Parameter handles and ids recorded on this tape.
    pub fn params(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) if id != ParamId::DETACHED => Some((
                Var {
                    index: i,
                    tape: self.id,
                },
                id,
            )),
            _ => None,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x W^T + b` applied to every row of `x`, with `W` stored `[out x in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.cols() != wv.shape()[1] {
            return Err(Error::dim("linear", xv.shape(), wv.shape()));
        }
        let (rows, d_in, d_out) = (xv.rows(), wv.shape()[1], wv.shape()[0]);
        let mut out = vec![0.0; rows * d_out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != d_out {
                return Err(Error::dim("linear bias", wv.shape(), bv.shape()));
            }
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(rows, d_in, d_out, xv.data(), false, wv.data(), true, 1.0, &mut out);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    fn broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape(), data)
        } else if bv.is_scalar() {
            let y = bv.data()[0];
            Ok(av.map(|x| f(x, y)))
        } else if av.is_scalar() {
            let x = av.data()[0];
            Ok(bv.map(|y| f(x, y)))
        } else {
            Err(Error::dim(name, av.shape(), bv.shape()))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    /// `ln(x + eps)`.
    pub fn log_eps(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a).map(|x| (x + eps).ln());
        self.push(t, Op::LogEps(a, eps))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        self.push(t, Op::Mean(a))
    }

    /// Sum of several scalar nodes.
    pub fn sum_scalars(&mut self, items: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        for &v in items {
            let t = self.value(v);
            if !t.is_scalar() {
                return Err(Error::dim("sum_scalars", t.shape(), &[1]));
            }
            total += t.data()[0];
        }
        Ok(self.push(Tensor::scalar(total), Op::SumScalars(items.to_vec())))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_cols(&mut self, items: &[Var]) -> Result<Var> {
        let first = self.value(*items.first().ok_or_else(|| Error::Domain("empty concat".into()))?);
        let lead = first.shape()[..first.rank() - 1].to_vec();
        let rows = first.rows();
        let mut total = 0;
        for &v in items {
            let t = self.value(v);
            if t.shape()[..t.rank() - 1] != lead[..] {
                return Err(Error::dim("concat", first.shape(), t.shape()));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in items {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::ConcatCols(items.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() || len == 0 {
            return Err(Error::dim("slice", xv.shape(), &[start, len]));
        }
        let out: Vec<f64> = (0..xv.rows())
            .flat_map(|r| xv.row(r)[start..start + len].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::SliceCols { x, start }))
    }

    /// Softmax over the last axis. Masked entries (`false`) get exactly zero weight.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if let Some(m) = mask {
            if m.len() != xv.numel() {
                return Err(Error::dim("softmax mask", xv.shape(), &[m.len()]));
            }
        }
        let mut out = vec![0.0; xv.numel()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let live: Vec<usize> = (0..cols)
                .filter(|&c| mask.is_none_or(|m| m[r * cols + c]))
                .collect();
            if live.is_empty() {
                return Err(Error::Domain("softmax over an all-masked row".into()));
            }
            let vals: Vec<f64> = live.iter().map(|&c| row[c]).collect();
            for (&c, p) in live.iter().zip(tensor::softmax_slice(&vals)) {
                out[r * cols + c] = p;
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out: Vec<f64> = (0..xv.rows())
            .flat_map(|r| tensor::log_softmax_slice(xv.row(r)))
            .collect();
        let t = Tensor::new(xv.shape(), out).expect("same shape");
        self.push(t, Op::LogSoftmax(x))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::dim("embedding", tv.shape(), &[]));
        }
        if ids.is_empty() {
            return Err(Error::Domain("empty id sequence".into()));
        }
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index { id, size: vocab });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(&[ids.len(), dim], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn conv_transpose1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let t = tensor::conv_transpose1d(self.value(x), self.value(w), stride, padding)?;
        Ok(self.push(t, Op::ConvTranspose { x, w, stride, padding }))
    }

    /// Adds a `[C]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.numel() != xv.cols() {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let mut t = xv.clone();
        for row in t.data_mut().chunks_mut(bv.numel()) {
            add_into(row, bv.data());
        }
        Ok(self.push(t, Op::AddBias(x, b)))
    }

    /// Keeps `len` positions of the length axis (second to last) starting at `start`.
    pub fn crop_seq(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 || start + len > xv.shape()[xv.rank() - 2] || len == 0 {
            return Err(Error::dim("crop", xv.shape(), &[start, len]));
        }
        let (t_len, ch) = (xv.shape()[xv.rank() - 2], xv.cols());
        let batch = xv.numel() / (t_len * ch);
        let mut out = Vec::with_capacity(batch * len * ch);
        for b in 0..batch {
            let base = (b * t_len + start) * ch;
            out.extend_from_slice(&xv.data()[base..base + len * ch]);
        }
        let mut shape = xv.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = len;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::CropSeq { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Stacks `n` tensors of shape `[B x W]` into `[B x n x W]`.
    pub fn stack_seq(&mut self, items: &[Var]) -> Result<Var> {
        let first = self.value(*items.first().ok_or_else(|| Error::Domain("empty stack".into()))?);
        let shape = first.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("stack", &shape, &[]));
        }
        let (batch, width, n) = (shape[0], shape[1], items.len());
        let mut out = vec![0.0; batch * n * width];
        for (i, &v) in items.iter().enumerate() {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("stack", &shape, t.shape()));
            }
            for b in 0..batch {
                out[(b * n + i) * width..(b * n + i + 1) * width].copy_from_slice(t.row(b));
            }
        }
        let t = Tensor::new(&[batch, n, width], out)?;
        Ok(self.push(t, Op::StackSeq(items.to_vec())))
    }

    fn batch_dims(&self, name: &'static str, first: Var, keys: Var) -> Result<(usize, usize, usize)> {
        let (fv, kv) = (self.value(first), self.value(keys));
        match (fv.shape(), kv.shape()) {
            (&[b1, _], &[b2, n, w]) if b1 == b2 => Ok((b1, n, w)),
            _ => Err(Error::dim(name, fv.shape(), kv.shape())),
        }
    }

    /// `out[b, i] = query[b] . keys[b, i]` for query `[B x W]`, keys `[B x n x W]`.
    pub fn batch_scores(&mut self, query: Var, keys: Var) -> Result<Var> {
        let (batch, n, width) = self.batch_dims("attention_scores", query, keys)?;
        if self.value(query).cols() != width {
            return Err(Error::dim("attention_scores", self.shape(query), self.shape(keys)));
        }
        let (qv, kv) = (self.value(query).data(), self.value(keys).data());
        let mut out = vec![0.0; batch * n];
        for b in 0..batch {
            let q = &qv[b * width..(b + 1) * width];
            for i in 0..n {
                let k = &kv[(b * n + i) * width..(b * n + i + 1) * width];
                out[b * n + i] = q.iter().zip(k).map(|(x, y)| x * y).sum();
            }
        }
        let t = Tensor::new(&[batch, n], out)?;
        Ok(self.push(t, Op::BatchScores { query, keys }))
    }

    /// `out[b] = sum_i weights[b, i] * keys[b, i]` for weights `[B x n]`, keys `[B x n x W]`.
    pub fn batch_weighted_sum(&mut self, weights: Var, keys: Var) -> Result<Var> {
        let (batch, n, width) = self.batch_dims("attention_context", weights, keys)?;
        if self.value(weights).cols() != n {
            return Err(Error::dim("attention_context", self.shape(weights), self.shape(keys)));
        }
        let (av, kv) = (self.value(weights).data(), self.value(keys).data());
        let mut out = vec![0.0; batch * width];
        for b in 0..batch {
            let dst = &mut out[b * width..(b + 1) * width];
            for i in 0..n {
                let a = av[b * n + i];
                let k = &kv[(b * n + i) * width..(b * n + i + 1) * width];
                dst.iter_mut().zip(k).for_each(|(d, &kk)| *d += a * kk);
            }
        }
        let t = Tensor::new(&[batch, width], out)?;
        Ok(self.push(t, Op::BatchWeightedSum { weights, keys }))
    }

    /// Row-wise select: row `r` comes from `on` where `mask[r]`, else from `off`.
    pub fn row_select(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var> {
        let (a, b) = (self.value(on), self.value(off));
        same_shape("row_select", a, b)?;
        if mask.len() != a.rows() {
            return Err(Error::dim("row_select", a.shape(), &[mask.len()]));
        }
        let mut t = b.clone();
        let cols = a.cols();
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            t.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(a.row(r));
        }
        Ok(self.push(
            t,
            Op::RowSelect {
                mask: mask.to_vec(),
                on,
                off,
            },
        ))
    }

    /// Pairwise cosine similarity between rows of `a` `[N x D]` and rows of `b` `[V x D]`.
    /// Norms are floored at `eps`, so a zero row has similarity 0 with everything.
    pub fn cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() || bv.rank() != 2 {
            return Err(Error::dim("cosine", av.shape(), bv.shape()));
        }
        let (n, v, d) = (av.rows(), bv.rows(), av.cols());
        let na = row_norms(av, eps);
        let nb = row_norms(bv, eps);
        let mut out = vec![0.0; n * v];
        gemm(n, d, v, av.data(), false, bv.data(), true, 0.0, &mut out);
        for i in 0..n {
            for j in 0..v {
                out[i * v + j] /= na[i] * nb[j];
            }
        }
        let t = Tensor::new(&[n, v], out)?;
        Ok(self.push(t, Op::Cosine { a, b, eps }))
    }

    /// `sum_i weights[i] * x[i, targets[i]]` over the rows of `x`.
    pub fn gather(&mut self, x: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if targets.len() != xv.rows() || weights.len() != targets.len() {
            return Err(Error::dim("gather", xv.shape(), &[targets.len(), weights.len()]));
        }
        let cols = xv.cols();
        let mut total = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t >= cols {
                return Err(Error::Index { id: t, size: cols });
            }
            if w != 0.0 {
                total += w * xv.row(r)[t];
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::Gather {
                x,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Mean over all elements of `kind(x - target)`; `target` is a constant.
    pub fn regression(&mut self, x: Var, target: &Tensor, kind: Regression) -> Result<Var> {
        let xv = self.value(x);
        same_shape("regression", xv, target)?;
        let total: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| kind.value(p - t))
            .sum();
        let mean = total / xv.numel() as f64;
        Ok(self.push(
            Tensor::scalar(mean),
            Op::Regress {
                x,
                target: target.clone(),
                kind,
            },
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id {
            return Err(Error::Contract("loss belongs to another tape".into()));
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {:?}", lv.shape())));
        }
        if !self.nodes[loss.index].requires_grad {
            return Err(Error::Contract("loss is detached: nothing on the tape requires gradients".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(vec![1.0]);
        for idx in (0..=loss.index).rev() {
            let Some(mut g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if self.broken == Some(node.op.name()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.local_backward(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_backward(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.index].value;
        let mut acc = |v: Var, delta: &[f64]| {
            if !self.nodes[v.index].requires_grad {
                return;
            }
            match &mut grads[v.index] {
                Some(existing) => add_into(existing, delta),
                slot @ None => *slot = Some(delta.to_vec()),
            }
        };
        let wants = |v: Var| self.nodes[v.index].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, bv.data(), true, 0.0, &mut ga);
                    acc(*a, &ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g, false, 0.0, &mut gb);
                    acc(*b, &gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (rows, d_in, d_out) = (xv.rows(), wv.shape()[1], wv.shape()[0]);
                if wants(*x) {
                    let mut gx = vec![0.0; rows * d_in];
                    gemm(rows, d_out, d_in, g, false, wv.data(), false, 0.0, &mut gx);
                    acc(*x, &gx);
                }
                if wants(*w) {
                    let mut gw = vec![0.0; d_out * d_in];
                    gemm(d_out, rows, d_in, g, true, xv.data(), false, 0.0, &mut gw);
                    acc(*w, &gw);
                }
                if let Some(b) = b {
                    acc(*b, &col_sums(g, d_out));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = out.numel();
                let pick = |t: &Tensor, i: usize| if t.numel() == n { t.data()[i] } else { t.data()[0] };
                let (mut ga, mut gb) = (vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    match node.op {
                        Op::Add(..) => {
                            ga[i] = g[i];
                            gb[i] = g[i];
                        }
                        Op::Sub(..) => {
                            ga[i] = g[i];
                            gb[i] = -g[i];
                        }
                        _ => {
                            ga[i] = g[i] * pick(bv, i);
                            gb[i] = g[i] * pick(av, i);
                        }
                    }
                }
                let reduce = |t: &Tensor, full: Vec<f64>| {
                    if t.numel() == n {
                        full
                    } else {
                        vec![full.iter().sum()]
                    }
                };
                acc(*a, &reduce(av, ga));
                acc(*b, &reduce(bv, gb));
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                acc(*a, &ga);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc(*a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(*a, &ga);
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*a, &ga);
            }
            Op::LogEps(a, eps) => {
                let ga: Vec<f64> = g.iter().zip(val(*a).data()).map(|(g, x)| g / (x + eps)).collect();
                acc(*a, &ga);
            }
            Op::Sum(a) => acc(*a, &vec![g[0]; val(*a).numel()]),
            Op::Mean(a) => {
                let n = val(*a).numel();
                acc(*a, &vec![g[0] / n as f64; n]);
            }
            Op::SumScalars(items) => {
                for &v in items {
                    acc(v, g);
                }
            }
            Op::ConcatCols(items) => {
                let total = out.cols();
                let mut offset = 0;
                for &v in items {
                    let w = val(v).cols();
                    let gv: Vec<f64> = g
                        .chunks(total)
                        .flat_map(|row| row[offset..offset + w].iter().copied())
                        .collect();
                    acc(v, &gv);
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (cols, w) = (xv.cols(), out.cols());
                let mut gx = vec![0.0; xv.numel()];
                for (r, row) in g.chunks(w).enumerate() {
                    gx[r * cols + start..r * cols + start + w].copy_from_slice(row);
                }
                acc(*x, &gx);
            }
            Op::Softmax(x) => {
                let cols = out.cols();
                let mut gx = vec![0.0; out.numel()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = y[c] * (gr[c] - dot);
                    }
                }
                acc(*x, &gx);
            }
            Op::LogSoftmax(x) => {
                let cols = out.cols();
                let mut gx = vec![0.0; out.numel()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let total: f64 = gr.iter().sum();
                    for c in 0..cols {
                        gx[r * cols + c] = gr[c] - y[c].exp() * total;
                    }
                }
                acc(*x, &gx);
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let dim = tv.cols();
                let mut gt = vec![0.0; tv.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * dim..(id + 1) * dim], &g[i * dim..(i + 1) * dim]);
                }
                acc(*table, &gt);
            }
            Op::ConvTranspose { x, w, stride, padding } => {
                let (xv, wv) = (val(*x), val(*w));
                let gt = Tensor::new(out.shape(), g.to_vec()).expect("grad shape");
                if wants(*x) {
                    let t_in = xv.shape()[xv.rank() - 2];
                    let gx = tensor::conv1d_to_len(&gt, wv, *stride, *padding, t_in).expect("adjoint");
                    acc(*x, gx.data());
                }
                if wants(*w) {
                    let gw = tensor::conv_transpose1d_kernel_grad(xv, &gt, wv.shape()[0], *stride, *padding)
                        .expect("kernel grad");
                    acc(*w, gw.data());
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, g);
                acc(*b, &col_sums(g, out.cols()));
            }
            Op::CropSeq { x, start } => {
                let xv = val(*x);
                let (t_len, ch) = (xv.shape()[xv.rank() - 2], xv.cols());
                let len = out.shape()[out.rank() - 2];
                let mut gx = vec![0.0; xv.numel()];
                for b in 0..xv.numel() / (t_len * ch) {
                    let dst = (b * t_len + start) * ch;
                    gx[dst..dst + len * ch].copy_from_slice(&g[b * len * ch..(b + 1) * len * ch]);
                }
                acc(*x, &gx);
            }
            Op::Reshape(x) => acc(*x, g),
            Op::StackSeq(items) => {
                let (batch, n, width) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                for (i, &v) in items.iter().enumerate() {
                    let mut gv = Vec::with_capacity(batch * width);
                    for b in 0..batch {
                        gv.extend_from_slice(&g[(b * n + i) * width..(b * n + i + 1) * width]);
                    }
                    acc(v, &gv);
                }
            }
            Op::BatchScores { query, keys } => {
                let (qv, kv) = (val(*query), val(*keys));
                let (batch, n, width) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
                let mut gq = vec![0.0; qv.numel()];
                let mut gk = vec![0.0; kv.numel()];
                for b in 0..batch {
                    let q = &qv.data()[b * width..(b + 1) * width];
                    for i in 0..n {
                        let gi = g[b * n + i];
                        let off = (b * n + i) * width;
                        for c in 0..width {
                            gq[b * width + c] += gi * kv.data()[off + c];
                            gk[off + c] = gi * q[c];
                        }
                    }
                }
                acc(*query, &gq);
                acc(*keys, &gk);
            }
            Op::BatchWeightedSum { weights, keys } => {
                let (av, kv) = (val(*weights), val(*keys));
                let (batch, n, width) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
                let mut ga = vec![0.0; av.numel()];
                let mut gk = vec![0.0; kv.numel()];
                for b in 0..batch {
                    let gb = &g[b * width..(b + 1) * width];
                    for i in 0..n {
                        let off = (b * n + i) * width;
                        let a = av.data()[b * n + i];
                        let k = &kv.data()[off..off + width];
                        ga[b * n + i] = gb.iter().zip(k).map(|(x, y)| x * y).sum();
                        for c in 0..width {
                            gk[off + c] = a * gb[c];
                        }
                    }
                }
                acc(*weights, &ga);
                acc(*keys, &gk);
            }
            Op::RowSelect { mask, on, off } => {
                let cols = out.cols();
                let (mut g_on, mut g_off) = (vec![0.0; g.len()], vec![0.0; g.len()]);
                for (r, &m) in mask.iter().enumerate() {
                    let dst = if m { &mut g_on } else { &mut g_off };
                    dst[r * cols..(r + 1) * cols].copy_from_slice(&g[r * cols..(r + 1) * cols]);
                }
                acc(*on, &g_on);
                acc(*off, &g_off);
            }
            Op::Cosine { a, b, eps } => {
                let (av, bv) = (val(*a), val(*b));
                let (n, v, d) = (av.rows(), bv.rows(), av.cols());
                let na = row_norms(av, *eps);
                let nb = row_norms(bv, *eps);
                // scaled[i,j] = g[i,j] / (na_i nb_j)
                let mut scaled = vec![0.0; n * v];
                let mut row_gc = vec![0.0; n];
                let mut col_gc = vec![0.0; v];
                for i in 0..n {
                    for j in 0..v {
                        let gij = g[i * v + j];
                        scaled[i * v + j] = gij / (na[i] * nb[j]);
                        let gc = gij * out.data()[i * v + j];
                        row_gc[i] += gc;
                        col_gc[j] += gc;
                    }
                }
                if wants(*a) {
                    let mut ga = vec![0.0; n * d];
                    gemm(n, v, d, &scaled, false, bv.data(), false, 0.0, &mut ga);
                    for i in 0..n {
                        if na[i] > *eps {
                            let f = row_gc[i] / (na[i] * na[i]);
                            for c in 0..d {
                                ga[i * d + c] -= f * av.data()[i * d + c];
                            }
                        }
                    }
                    acc(*a, &ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; v * d];
                    gemm(v, n, d, &scaled, true, av.data(), false, 0.0, &mut gb);
                    for j in 0..v {
                        if nb[j] > *eps {
                            let f = col_gc[j] / (nb[j] * nb[j]);
                            for c in 0..d {
                                gb[j * d + c] -= f * bv.data()[j * d + c];
                            }
                        }
                    }
                    acc(*b, &gb);
                }
            }
            Op::Gather { x, targets, weights } => {
                let xv = val(*x);
                let cols = xv.cols();
                let mut gx = vec![0.0; xv.numel()];
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    gx[r * cols + t] += g[0] * w;
                }
                acc(*x, &gx);
            }
            Op::Regress { x, target, kind } => {
                let xv = val(*x);
                let scale = g[0] / xv.numel() as f64;
                let gx: Vec<f64> = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| scale * kind.derivative(p - t))
                    .collect();
                acc(*x, &gx);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_norms(t: &Tensor, eps: f64) -> Vec<f64> {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(eps))
        .collect()
}
