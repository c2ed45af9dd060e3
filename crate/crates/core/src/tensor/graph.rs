use super::{gemm, matmul_dims, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    /// rhs repeats over the lhs leading axis
    Rhs,
    /// lhs repeats over the rhs leading axis
    Lhs,
}

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnOp {
    Exp,
    Log,
    Square,
    Sigmoid,
    Softplus,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinOp, Bcast, Var, Var),
    Unary(UnOp, Var),
    MatMul(Var, Var),
    Prelu(Var, Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    LogSumExpRows(Var),
    Reshape(Var),
    Row(Var, usize),
    ConcatCols(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape. Inputs of every node precede it, so the
/// recorded order is a valid topological order for the backward sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros when the root does not depend on it.
    pub fn wrt(&self, var: Var, graph: &Graph) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(graph.value(var).shape()),
        }
    }

    pub fn take(&mut self, var: Var, graph: &Graph) -> Tensor {
        match self.grads.get_mut(var.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(graph.value(var).shape()),
        }
    }
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::Same)
    } else if !a.is_empty() && &a[1..] == b {
        Ok(Bcast::Rhs)
    } else if !b.is_empty() && &b[1..] == a {
        Ok(Bcast::Lhs)
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

impl UnOp {
    fn name(self) -> &'static str {
        match self {
            UnOp::Exp => "exp",
            UnOp::Log => "log",
            UnOp::Square => "square",
            UnOp::Sigmoid => "sigmoid",
            UnOp::Softplus => "softplus",
            UnOp::Scale(_) => "scale",
            UnOp::AddScalar(_) => "add_scalar",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            UnOp::Exp => x.exp(),
            UnOp::Log => x.ln(),
            UnOp::Square => x * x,
            UnOp::Sigmoid => sigmoid(x),
            UnOp::Softplus => softplus(x),
            UnOp::Scale(c) => c * x,
            UnOp::AddScalar(c) => x + c,
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnOp::Exp => y,
            UnOp::Log => 1.0 / x,
            UnOp::Square => 2.0 * x,
            UnOp::Sigmoid => y * (1.0 - y),
            UnOp::Softplus => sigmoid(x),
            UnOp::Scale(c) => c,
            UnOp::AddScalar(_) => 1.0,
        }
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant by backward.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(op.name(), va.shape(), vb.shape())?;
        if let BinOp::Div = op {
            if vb.data().iter().any(|&v| v == 0.0) {
                return Err(Error::DivisionByZero { op: "div" });
            }
        }
        let value = match kind {
            Bcast::Same => Tensor {
                shape: va.shape.clone(),
                data: va.data.iter().zip(&vb.data).map(|(&x, &y)| op.apply(x, y)).collect(),
            },
            Bcast::Rhs => {
                let inner = vb.numel();
                Tensor {
                    shape: va.shape.clone(),
                    data: va
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| op.apply(x, vb.data[i % inner]))
                        .collect(),
                }
            }
            Bcast::Lhs => {
                let inner = va.numel();
                Tensor {
                    shape: vb.shape.clone(),
                    data: vb
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, &y)| op.apply(va.data[i % inner], y))
                        .collect(),
                }
            }
        };
        self.push(op.name(), value, Op::Binary(op, kind, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    fn unary(&mut self, op: UnOp, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| op.apply(x));
        self.push(op.name(), value, Op::Unary(op, a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonPositive { op: "log" });
        }
        self.unary(UnOp::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Square, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Softplus, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnOp::Scale(c), a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Scale(-1.0), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnOp::AddScalar(c), a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `max(0, x) + slope·min(0, x)` with a single shared slope.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.value(slope).numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "prelu",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(slope).shape().to_vec(),
            });
        }
        let a = self.value(slope).item();
        let value = self.value(x).map(|v| if v > 0.0 { v } else { a * v });
        self.push("prelu", value, Op::Prelu(x, slope), &[x, slope])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sums everything but the leading axis: `[B, ...] -> [B]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() < 2 {
            return Err(Error::ShapeMismatch {
                op: "sum_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let data = (0..v.rows()).map(|i| v.row(i).iter().sum()).collect();
        let value = Tensor::vector(data);
        self.push("sum_rows", value, Op::SumRows(a), &[a])
    }

    /// Row-wise log-sum-exp of a `[B, C]` matrix.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "logsumexp_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let data = (0..v.rows())
            .map(|i| {
                let row = v.row(i);
                let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push("logsumexp_rows", Tensor::vector(data), Op::LogSumExpRows(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Leading-axis slice `i` of a tensor of rank ≥ 2.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rank() < 2 || i >= v.rows() {
            return Err(Error::ShapeMismatch {
                op: "row",
                lhs: v.shape().to_vec(),
                rhs: vec![i],
            });
        }
        let value = Tensor {
            shape: v.shape()[1..].to_vec(),
            data: v.row(i).to_vec(),
        };
        self.push("row", value, Op::Row(a, i), &[a])
    }

    /// Stacks equal-length vectors `[B]` as the columns of a `[B, k]` matrix.
    pub fn concat_cols(&mut self, cols: &[Var]) -> Result<Var> {
        let first = cols
            .first()
            .ok_or_else(|| Error::InvalidParameter("concat of nothing".into()))?;
        let b = self.value(*first).numel();
        for c in cols {
            let s = self.value(*c).shape();
            if s.len() != 1 || s[0] != b {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![b],
                    rhs: s.to_vec(),
                });
            }
        }
        let k = cols.len();
        let mut data = vec![0.0; b * k];
        for (j, c) in cols.iter().enumerate() {
            for (i, &x) in self.value(*c).data().iter().enumerate() {
                data[i * k + j] = x;
            }
        }
        let value = Tensor::new(vec![b, k], data)?;
        self.push("concat_cols", value, Op::ConcatCols(cols.to_vec()), cols)
    }

    /// Reverse sweep from a single-element `root`. Each call starts from fresh
    /// accumulators, so repeated calls give identical results.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        for (id, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[id].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[var.0].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        f(slot.data_mut());
    }

    #[allow(clippy::too_many_arguments)]
    fn binary_backward(
        &self,
        op: BinOp,
        a: Var,
        b: Var,
        gd: &[f64],
        grads: &mut [Option<Tensor>],
        ia: impl Fn(usize) -> usize,
        ib: impl Fn(usize) -> usize,
    ) {
        let va = self.value(a).data();
        let vb = self.value(b).data();
        self.accumulate(grads, a, |ga| {
            for (i, &gi) in gd.iter().enumerate() {
                let y = vb[ib(i)];
                ga[ia(i)] += match op {
                    BinOp::Add | BinOp::Sub => gi,
                    BinOp::Mul => gi * y,
                    BinOp::Div => gi / y,
                };
            }
        });
        self.accumulate(grads, b, |gb| {
            for (i, &gi) in gd.iter().enumerate() {
                let (x, y) = (va[ia(i)], vb[ib(i)]);
                gb[ib(i)] += match op {
                    BinOp::Add => gi,
                    BinOp::Sub => -gi,
                    BinOp::Mul => gi * x,
                    BinOp::Div => -gi * x / (y * y),
                };
            }
        });
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, kind, a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let (na, nb) = (va.len(), vb.len());
                match kind {
                    Bcast::Same => self.binary_backward(*op, *a, *b, gd, grads, |i| i, |i| i),
                    Bcast::Rhs => self.binary_backward(*op, *a, *b, gd, grads, |i| i, |i| i % nb),
                    Bcast::Lhs => self.binary_backward(*op, *a, *b, gd, grads, |i| i % na, |i| i),
                }
            }
            Op::Unary(op, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..gd.len() {
                        ga[i] += gd[i] * op.derivative(x[i], y[i]);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k, n) = matmul_dims(va.shape(), vb.shape()).expect("checked in forward");
                self.accumulate(grads, *a, |ga| {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, gd, (n, 1), vb.data(), (1, n), ga, true);
                });
                self.accumulate(grads, *b, |gb| {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, va.data(), (1, k), gd, (n, 1), gb, true);
                });
            }
            Op::Prelu(x, slope) => {
                let xv = self.value(*x).data();
                let a = self.value(*slope).item();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gd.len() {
                        gx[i] += if xv[i] > 0.0 { gd[i] } else { a * gd[i] };
                    }
                });
                self.accumulate(grads, *slope, |gs| {
                    gs[0] += xv
                        .iter()
                        .zip(gd)
                        .map(|(&v, &gi)| if v > 0.0 { 0.0 } else { v * gi })
                        .sum::<f64>();
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|v| *v += s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                let s = gd[0] / n;
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|v| *v += s));
            }
            Op::SumRows(a) => {
                let n = self.value(*a).row_len();
                self.accumulate(grads, *a, |ga| {
                    for (i, v) in ga.iter_mut().enumerate() {
                        *v += gd[i / n];
                    }
                });
            }
            Op::LogSumExpRows(a) => {
                let va = self.value(*a);
                let lse = node.value.data();
                let k = va.row_len();
                self.accumulate(grads, *a, |ga| {
                    for (i, v) in ga.iter_mut().enumerate() {
                        let r = i / k;
                        *v += gd[r] * (va.data()[i] - lse[r]).exp();
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(gd).for_each(|(v, &gi)| *v += gi);
                });
            }
            Op::Row(a, r) => {
                let n = gd.len();
                self.accumulate(grads, *a, |ga| {
                    ga[r * n..(r + 1) * n].iter_mut().zip(gd).for_each(|(v, &gi)| *v += gi);
                });
            }
            Op::ConcatCols(cols) => {
                let k = cols.len();
                for (j, c) in cols.iter().enumerate() {
                    self.accumulate(grads, *c, |gc| {
                        for (i, v) in gc.iter_mut().enumerate() {
                            *v += gd[i * k + j];
                        }
                    });
                }
            }
        }
    }
}
