//! Wengert tape: every forward operation appends a node holding its value and
//! the ids of its inputs; `backward` replays the list in reverse.
//!
//! Two reverse sweeps exist. [`Tape::backward`] produces plain numeric
//! gradients for a scalar loss. [`Tape::grad`] records the gradient itself as
//! new tape nodes, which is what a gradient penalty needs: the penalty built
//! from that gradient can then be differentiated again by `backward`.

use crate::error::{Result, TapeError};
use crate::tensor::{gemm, Operand, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter-free operation kinds accepted by [`Tape::record`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Concat,
    Sigmoid,
    Relu,
    Softmax,
    Log,
    Sum,
    Mean,
    Square,
    Sqrt,
    L2Norm,
    Transpose,
    Slice { start: usize, len: usize },
    Scale(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    GroupMatMul {
        a: Var,
        b: Var,
        groups: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Recip(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    Softmax(Var),
    LogSoftmax(Var),
    RowL2Norm(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, indices: Vec<usize> },
    GradReverse(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::GroupMatMul { .. } => "group_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Recip(_) => "recip",
            Op::Sum(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::RowL2Norm(_) => "row_l2norm",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SelectRows { .. } => "select_rows",
            Op::GradReverse(..) => "grad_reverse",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::GroupMatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::GradReverse(x, _)
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Square(x)
            | Op::Sqrt(x)
            | Op::Recip(x)
            | Op::Sum(x)
            | Op::SumRows(x)
            | Op::SumCols(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::RowL2Norm(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::SliceCols { x, .. }
            | Op::SelectRows { x, .. } => vec![*x],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Numeric gradients from [`Tape::backward`], one slot per leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf. `None` only for leaves that do not require grad.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

type Shape = [usize; 2];

fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a[0], b[0]), dim(a[1], b[1])) {
        (Some(r), Some(c)) => Ok([r, c]),
        _ => Err(TapeError::Shape { op, lhs: a, rhs: b }),
    }
}

/// Elementwise `f(a, b)` over `out` with row/column broadcasting of either side.
fn broadcast_zip(a: &Tensor, b: &Tensor, out: Shape, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == out && b.shape() == out {
        return a.zip_map(b, f).expect("shapes checked");
    }
    let (ar, ac) = (a.rows() == 1, a.cols() == 1);
    let (br, bc) = (b.rows() == 1, b.cols() == 1);
    let mut data = Vec::with_capacity(out[0] * out[1]);
    for i in 0..out[0] {
        for j in 0..out[1] {
            let x = a.get(if ar { 0 } else { i }, if ac { 0 } else { j });
            let y = b.get(if br { 0 } else { i }, if bc { 0 } else { j });
            data.push(f(x, y));
        }
    }
    Tensor::new(out[0], out[1], data).expect("length matches shape")
}

/// Sum a gradient of a broadcast result back down to the input's shape.
fn reduce_to(g: &Tensor, shape: Shape) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    let (rr, rc) = (shape[0] == 1, shape[1] == 1);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let (oi, oj) = (if rr { 0 } else { i }, if rc { 0 } else { j });
            let v = out.get(oi, oj) + g.get(i, j);
            out.set(oi, oj, v);
        }
    }
    out
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_slice_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_slice_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(TapeError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf; gradients are collected for it when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TapeError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Constant copy of `x`'s current value, cut from the graph.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// Generic entry point by operation kind; the named methods are equivalent.
    pub fn record(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let unary = |inputs: &[Var]| match inputs {
            [x] => Ok(*x),
            _ => Err(TapeError::Contract(format!(
                "{kind:?} takes one input, got {}",
                inputs.len()
            ))),
        };
        let binary = |inputs: &[Var]| match inputs {
            [a, b] => Ok((*a, *b)),
            _ => Err(TapeError::Contract(format!(
                "{kind:?} takes two inputs, got {}",
                inputs.len()
            ))),
        };
        match kind {
            OpKind::MatMul => {
                let (a, b) = binary(inputs)?;
                self.matmul(a, b)
            }
            OpKind::Add => {
                let (a, b) = binary(inputs)?;
                self.add(a, b)
            }
            OpKind::Mul => {
                let (a, b) = binary(inputs)?;
                self.mul(a, b)
            }
            OpKind::Concat => self.concat_cols(inputs),
            OpKind::Sigmoid => self.sigmoid(unary(inputs)?),
            OpKind::Relu => self.relu(unary(inputs)?),
            OpKind::Softmax => self.softmax(unary(inputs)?),
            OpKind::Log => self.log(unary(inputs)?),
            OpKind::Sum => self.sum(unary(inputs)?),
            OpKind::Mean => self.mean(unary(inputs)?),
            OpKind::Square => self.square(unary(inputs)?),
            OpKind::Sqrt => self.sqrt(unary(inputs)?),
            OpKind::L2Norm => self.row_l2norm(unary(inputs)?),
            OpKind::Transpose => self.transpose(unary(inputs)?),
            OpKind::Slice { start, len } => self.slice_cols(unary(inputs)?, start, len),
            OpKind::Scale(c) => self.scale(unary(inputs)?, c),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), value)
    }

    /// Block-diagonal batched product. `a` stacks `groups` blocks of shape
    /// `[m, k]`; `b` stacks blocks of `[k, n]`, or `[n, k]` when `trans_b`.
    pub fn group_matmul(&mut self, a: Var, b: Var, groups: usize, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let err = || TapeError::Shape {
            op: "group_matmul",
            lhs: av.shape(),
            rhs: bv.shape(),
        };
        if groups == 0 || av.rows() % groups != 0 || bv.rows() % groups != 0 {
            return Err(err());
        }
        let m = av.rows() / groups;
        let k = av.cols();
        let n = if trans_b {
            if bv.cols() != k {
                return Err(err());
            }
            bv.rows() / groups
        } else {
            if bv.rows() / groups != k {
                return Err(err());
            }
            bv.cols()
        };
        let mut out = Tensor::zeros(groups * m, n);
        for g in 0..groups {
            let lhs = Operand::block(av.data(), g * m, m, k);
            let rhs = if trans_b {
                Operand::block(bv.data(), g * n, n, k).t()
            } else {
                Operand::block(bv.data(), g * k, k, n)
            };
            gemm(lhs, rhs, &mut out.data_mut()[g * m * n..(g + 1) * m * n], 0.0);
        }
        self.push(
            Op::GroupMatMul {
                a,
                b,
                groups,
                trans_b,
            },
            out,
        )
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let out = broadcast_shape(op.name(), self.shape(a), self.shape(b))?;
        let value = broadcast_zip(self.value(a), self.value(b), out, f);
        self.push(op, value)
    }

    /// Elementwise sum; either side may broadcast along a unit dimension.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    /// Hadamard product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x, c), value)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push(Op::AddScalar(x), value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        self.push(Op::Sigmoid(x), value)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), value)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), value)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::ln);
        self.push(Op::Log(x), value)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v);
        self.push(Op::Square(x), value)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::sqrt);
        self.push(Op::Sqrt(x), value)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::recip);
        self.push(Op::Recip(x), value)
    }

    /// Sum of all entries, `[1, 1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(TapeError::Contract("mean of an empty tensor".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Column sums, `[m, n] -> [1, n]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Tensor::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(xv.row_slice(r)) {
                *o += v;
            }
        }
        self.push(Op::SumRows(x), out)
    }

    /// Row sums, `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::column((0..xv.rows()).map(|r| xv.row_slice(r).iter().sum()).collect());
        self.push(Op::SumCols(x), out)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = softmax_rows(self.value(x));
        self.push(Op::Softmax(x), value)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let value = log_softmax_rows(self.value(x));
        self.push(Op::LogSoftmax(x), value)
    }

    /// Euclidean norm of every row, `[m, n] -> [m, 1]`.
    pub fn row_l2norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::column(
            (0..xv.rows())
                .map(|r| xv.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect(),
        );
        self.push(Op::RowL2Norm(x), out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose();
        self.push(Op::Transpose(x), value)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != rows * cols {
            return Err(TapeError::Shape {
                op: "reshape",
                lhs: xv.shape(),
                rhs: [rows, cols],
            });
        }
        let value = xv.reshaped(rows, cols)?;
        self.push(Op::Reshape(x), value)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(TapeError::Contract("concat of zero tensors".into()));
        };
        let rows = self.shape(first)[0];
        let mut cols = 0;
        for &x in xs {
            let s = self.shape(x);
            if s[0] != rows {
                return Err(TapeError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first),
                    rhs: s,
                });
            }
            cols += s[1];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row_slice(r));
            }
        }
        let value = Tensor::new(rows, cols, data)?;
        self.push(Op::ConcatCols(xs.to_vec()), value)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(TapeError::Contract("concat of zero tensors".into()));
        };
        let cols = self.shape(first)[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let v = self.value(x);
            if v.cols() != cols {
                return Err(TapeError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first),
                    rhs: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(rows, cols, data)?;
        self.push(Op::ConcatRows(xs.to_vec()), value)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(TapeError::Shape {
                op: "slice_cols",
                lhs: xv.shape(),
                rhs: [xv.rows(), start + len],
            });
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row_slice(r)[start..start + len]);
        }
        let value = Tensor::new(xv.rows(), len, data)?;
        self.push(Op::SliceCols { x, start }, value)
    }

    /// Gather rows by index (repeats allowed); gradients scatter-add back.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.rows()) {
            return Err(TapeError::Shape {
                op: "select_rows",
                lhs: xv.shape(),
                rhs: [bad + 1, xv.cols()],
            });
        }
        let value = xv.select_rows(indices);
        self.push(
            Op::SelectRows {
                x,
                indices: indices.to_vec(),
            },
            value,
        )
    }

    /// Identity forward; the backward pass multiplies the upstream gradient by `-coefficient`.
    pub fn grad_reverse(&mut self, x: Var, coefficient: f64) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(Op::GradReverse(x, coefficient), value)
    }

    /// `x * w + b` with `b` a `[1, n]` row broadcast over the batch.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add(h, b)
    }

    /// Reverse sweep from a scalar loss. Every leaf that requires grad gets a
    /// slot; leaves the loss does not depend on receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(TapeError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
        }
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            match node.op {
                Op::Leaf if node.requires_grad => {
                    if slot.is_none() {
                        let [r, c] = node.value.shape();
                        *slot = Some(Tensor::zeros(r, c));
                    }
                }
                _ => *slot = None,
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &t),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if rg(a) {
                    let mut t = Tensor::zeros(av.rows(), av.cols());
                    gemm(Operand::plain(g), Operand::transposed(bv), t.data_mut(), 0.0);
                    acc(*a, t)?;
                }
                if rg(b) {
                    let mut t = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(Operand::transposed(av), Operand::plain(g), t.data_mut(), 0.0);
                    acc(*b, t)?;
                }
            }
            Op::GroupMatMul {
                a,
                b,
                groups,
                trans_b,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let groups = *groups;
                let m = av.rows() / groups;
                let k = av.cols();
                let n = g.cols();
                if rg(a) {
                    let mut t = Tensor::zeros(av.rows(), k);
                    for grp in 0..groups {
                        let rhs = if *trans_b {
                            Operand::block(bv.data(), grp * n, n, k)
                        } else {
                            Operand::block(bv.data(), grp * k, k, n).t()
                        };
                        gemm(
                            Operand::block(g.data(), grp * m, m, n),
                            rhs,
                            &mut t.data_mut()[grp * m * k..(grp + 1) * m * k],
                            0.0,
                        );
                    }
                    acc(*a, t)?;
                }
                if rg(b) {
                    let mut t = Tensor::zeros(bv.rows(), bv.cols());
                    for grp in 0..groups {
                        if *trans_b {
                            gemm(
                                Operand::block(g.data(), grp * m, m, n).t(),
                                Operand::block(av.data(), grp * m, m, k),
                                &mut t.data_mut()[grp * n * k..(grp + 1) * n * k],
                                0.0,
                            );
                        } else {
                            gemm(
                                Operand::block(av.data(), grp * m, m, k).t(),
                                Operand::block(g.data(), grp * m, m, n),
                                &mut t.data_mut()[grp * k * n..(grp + 1) * k * n],
                                0.0,
                            );
                        }
                    }
                    acc(*b, t)?;
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(a) {
                    acc(*a, reduce_to(g, self.shape(*a)))?;
                }
                if rg(b) {
                    let mut t = reduce_to(g, self.shape(*b));
                    if sign < 0.0 {
                        t = t.map(|v| -v);
                    }
                    acc(*b, t)?;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if rg(a) {
                    let full = broadcast_zip(g, bv, g.shape(), |x, y| x * y);
                    acc(*a, reduce_to(&full, av.shape()))?;
                }
                if rg(b) {
                    let full = broadcast_zip(g, av, g.shape(), |x, y| x * y);
                    acc(*b, reduce_to(&full, bv.shape()))?;
                }
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c))?,
            Op::GradReverse(x, c) => acc(*x, g.map(|v| -v * c))?,
            Op::AddScalar(x) => acc(*x, g.clone())?,
            Op::Sigmoid(x) => acc(*x, g.zip_map(y, |g, s| g * s * (1.0 - s))?)?,
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(*x, g.zip_map(xv, |g, v| if v > 0.0 { g } else { 0.0 })?)?
            }
            Op::Tanh(x) => acc(*x, g.zip_map(y, |g, t| g * (1.0 - t * t))?)?,
            Op::Exp(x) => acc(*x, g.zip_map(y, |g, e| g * e)?)?,
            Op::Log(x) => acc(*x, g.zip_map(self.value(*x), |g, v| g / v)?)?,
            Op::Square(x) => acc(*x, g.zip_map(self.value(*x), |g, v| 2.0 * g * v)?)?,
            Op::Sqrt(x) => acc(
                *x,
                g.zip_map(y, |g, s| if s > 0.0 { 0.5 * g / s } else { 0.0 })?,
            )?,
            Op::Recip(x) => acc(*x, g.zip_map(y, |g, r| -g * r * r)?)?,
            Op::Sum(x) => {
                let [r, c] = self.shape(*x);
                acc(*x, Tensor::full(r, c, g.data()[0]))?
            }
            Op::SumRows(x) | Op::SumCols(x) => {
                let [r, c] = self.shape(*x);
                let ones = Tensor::ones(r, c);
                acc(*x, broadcast_zip(&ones, g, [r, c], |_, v| v))?
            }
            Op::Softmax(x) => {
                let mut t = g.clone();
                for r in 0..t.rows() {
                    let yr = y.row_slice(r);
                    let dot: f64 = g.row_slice(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (tv, yv) in t.row_slice_mut(r).iter_mut().zip(yr) {
                        *tv = yv * (*tv - dot);
                    }
                }
                acc(*x, t)?
            }
            Op::LogSoftmax(x) => {
                let mut t = g.clone();
                for r in 0..t.rows() {
                    let total: f64 = g.row_slice(r).iter().sum();
                    for (tv, lv) in t.row_slice_mut(r).iter_mut().zip(y.row_slice(r)) {
                        *tv -= lv.exp() * total;
                    }
                }
                acc(*x, t)?
            }
            Op::RowL2Norm(x) => {
                let xv = self.value(*x);
                let mut t = xv.clone();
                for r in 0..t.rows() {
                    let (norm, up) = (y.get(r, 0), g.get(r, 0));
                    for v in t.row_slice_mut(r) {
                        *v = if norm > 0.0 { up * *v / norm } else { 0.0 };
                    }
                }
                acc(*x, t)?
            }
            Op::Transpose(x) => acc(*x, g.transpose())?,
            Op::Reshape(x) => {
                let [r, c] = self.shape(*x);
                acc(*x, g.reshaped(r, c)?)?
            }
            Op::ConcatCols(xs) => {
                let mut offset = 0;
                for x in xs {
                    let [r, c] = self.shape(*x);
                    if rg(x) {
                        let mut t = Tensor::zeros(r, c);
                        for row in 0..r {
                            t.row_slice_mut(row)
                                .copy_from_slice(&g.row_slice(row)[offset..offset + c]);
                        }
                        acc(*x, t)?;
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for x in xs {
                    let [r, c] = self.shape(*x);
                    if rg(x) {
                        let t = Tensor::new(r, c, g.data()[offset * c..(offset + r) * c].to_vec())?;
                        acc(*x, t)?;
                    }
                    offset += r;
                }
            }
            Op::SliceCols { x, start } => {
                let [r, c] = self.shape(*x);
                let mut t = Tensor::zeros(r, c);
                let w = g.cols();
                for row in 0..r {
                    t.row_slice_mut(row)[*start..start + w].copy_from_slice(g.row_slice(row));
                }
                acc(*x, t)?
            }
            Op::SelectRows { x, indices } => {
                let [r, c] = self.shape(*x);
                let mut t = Tensor::zeros(r, c);
                for (src, &dst) in indices.iter().enumerate() {
                    for (o, v) in t.row_slice_mut(dst).iter_mut().zip(g.row_slice(src)) {
                        *o += v;
                    }
                }
                acc(*x, t)?
            }
        }
        Ok(())
    }

    fn reduce_var(&mut self, v: Var, target: Shape) -> Result<Var> {
        let s = self.shape(v);
        if s == target {
            return Ok(v);
        }
        let v = if target[0] == 1 && s[0] != 1 {
            self.sum_rows(v)?
        } else {
            v
        };
        if target[1] == 1 && self.shape(v)[1] != 1 {
            self.sum_cols(v)
        } else {
            Ok(v)
        }
    }

    /// Gradient of `sum(output)` with respect to `wrt`, recorded as tape
    /// operations so it can itself be differentiated.
    pub fn grad(&mut self, output: Var, wrt: Var) -> Result<Var> {
        let [r, c] = self.shape(wrt);
        if wrt.0 > output.0 {
            return self.constant(Tensor::zeros(r, c));
        }
        let span = output.0 + 1;
        let mut depends = vec![false; span];
        depends[wrt.0] = true;
        for i in wrt.0 + 1..span {
            depends[i] = self.nodes[i].op.inputs().iter().any(|v| v.0 >= wrt.0 && depends[v.0]);
        }
        if !depends[output.0] {
            return self.constant(Tensor::zeros(r, c));
        }
        let mut adjoint: Vec<Option<Var>> = vec![None; span];
        let [or, oc] = self.shape(output);
        adjoint[output.0] = Some(self.constant(Tensor::ones(or, oc))?);
        for i in (wrt.0 + 1..span).rev() {
            let Some(adj) = adjoint[i] else { continue };
            if !depends[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (pos, input) in op.inputs().into_iter().enumerate() {
                if input.0 < wrt.0 || !depends[input.0] {
                    continue;
                }
                let contrib = self.vjp_symbolic(Var(i), &op, pos, adj)?;
                adjoint[input.0] = Some(match adjoint[input.0] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }
        match adjoint[wrt.0] {
            Some(v) => Ok(v),
            None => self.constant(Tensor::zeros(r, c)),
        }
    }

    fn vjp_symbolic(&mut self, y: Var, op: &Op, pos: usize, adj: Var) -> Result<Var> {
        match *op {
            Op::MatMul(a, b) => {
                if pos == 0 {
                    let bt = self.transpose(b)?;
                    self.matmul(adj, bt)
                } else {
                    let at = self.transpose(a)?;
                    self.matmul(at, adj)
                }
            }
            Op::Add(a, b) => {
                let target = self.shape(if pos == 0 { a } else { b });
                self.reduce_var(adj, target)
            }
            Op::Sub(a, b) => {
                if pos == 0 {
                    let target = self.shape(a);
                    self.reduce_var(adj, target)
                } else {
                    let target = self.shape(b);
                    let neg = self.neg(adj)?;
                    self.reduce_var(neg, target)
                }
            }
            Op::Mul(a, b) => {
                let (this, other) = if pos == 0 { (a, b) } else { (b, a) };
                let target = self.shape(this);
                let t = self.mul(adj, other)?;
                self.reduce_var(t, target)
            }
            Op::Scale(_, c) => self.scale(adj, c),
            Op::GradReverse(_, c) => self.scale(adj, -c),
            Op::AddScalar(_) => Ok(adj),
            Op::Sigmoid(_) => {
                let neg = self.neg(y)?;
                let one_minus = self.add_scalar(neg, 1.0)?;
                let d = self.mul(y, one_minus)?;
                self.mul(adj, d)
            }
            Op::Relu(x) => {
                let mask = self.value(x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask)?;
                self.mul(adj, mask)
            }
            Op::Tanh(_) => {
                let sq = self.square(y)?;
                let neg = self.neg(sq)?;
                let d = self.add_scalar(neg, 1.0)?;
                self.mul(adj, d)
            }
            Op::Exp(_) => self.mul(adj, y),
            Op::Log(x) => {
                let r = self.recip(x)?;
                self.mul(adj, r)
            }
            Op::Square(x) => {
                let d = self.scale(x, 2.0)?;
                self.mul(adj, d)
            }
            Op::Sqrt(_) => {
                let r = self.recip(y)?;
                let d = self.scale(r, 0.5)?;
                self.mul(adj, d)
            }
            Op::Recip(_) => {
                let sq = self.square(y)?;
                let d = self.neg(sq)?;
                self.mul(adj, d)
            }
            Op::Sum(x) | Op::SumRows(x) | Op::SumCols(x) => {
                let [r, c] = self.shape(x);
                let ones = self.constant(Tensor::ones(r, c))?;
                self.mul(ones, adj)
            }
            Op::Transpose(_) => self.transpose(adj),
            Op::Reshape(x) => {
                let [r, c] = self.shape(x);
                self.reshape(adj, r, c)
            }
            Op::ConcatCols(ref xs) => {
                let offset: usize = xs[..pos].iter().map(|v| self.shape(*v)[1]).sum();
                let width = self.shape(xs[pos])[1];
                self.slice_cols(adj, offset, width)
            }
            Op::SliceCols { x, start } => {
                let [r, c] = self.shape(x);
                let w = self.shape(adj)[1];
                let mut parts = Vec::with_capacity(3);
                if start > 0 {
                    parts.push(self.constant(Tensor::zeros(r, start))?);
                }
                parts.push(adj);
                if start + w < c {
                    parts.push(self.constant(Tensor::zeros(r, c - start - w))?);
                }
                self.concat_cols(&parts)
            }
            ref other => Err(TapeError::Unsupported(other.name())),
        }
    }
}
