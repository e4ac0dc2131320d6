//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends a node holding its value and
//! parents. Node indices only grow, so the node list is already a topological
//! order and the backward pass is a single reverse sweep.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction axis for row/column reductions of a matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Collapse rows: `m×n → 1×n`.
    Rows,
    /// Collapse columns: `m×n → m×1`.
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, Axis),
    LogSumExp(Var, Axis),
    LogSoftmax(Var),
    Transpose(Var),
    Row(Var, usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Confined to one thread while recording.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to the trainable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf, `None` when the leaf does not influence the root
    /// or was recorded as a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, zeros when it does not influence the root.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let val = tape.value(v);
                Tensor::zeros(val.rows(), val.cols())
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "{op} expects a rank-2 tensor, got shape {:?}",
            t.shape()
        )))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::dim(op, a.shape(), b.shape()))
    }
}

/// `c = alpha * a * b + beta * c` for strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every access implied by the strides,
    // which describe either a row-major matrix or its transpose.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        a.data(),
        (k as isize, 1),
        b.data(),
        (n as isize, 1),
        0.0,
        &mut out,
    );
    Tensor::matrix(m, n, out).expect("matmul output shape")
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        check_matrix(name, xv)?;
        let out = xv.map(f);
        self.push(name, out, op, &[x])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_matrix(name, av)?;
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_matrix("matmul", av)?;
        check_matrix("matmul", bv)?;
        if av.cols() != bv.rows() {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let out = matmul_values(av, bv);
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a `1×n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        check_matrix("add_row", xv)?;
        check_matrix("add_row", rv)?;
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::dim("add_row", xv.shape(), rv.shape()));
        }
        let n = xv.cols();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += rv.data()[i % n];
        }
        self.push("add_row", out, Op::AddRow(x, row), &[x, row])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("scale", x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", x, Op::AddScalar(x), |v| v + s)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, Op::Neg(x), |v| -v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp(x), f64::exp)
    }

    /// Natural log. Non-positive inputs are rejected rather than clamped.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain { op: "log", value: bad });
        }
        self.unary("log", x, Op::Log(x), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, Op::Square(x), |v| v * v)
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Usage(format!("clamp bounds reversed: {lo} > {hi}")));
        }
        self.unary("clamp", x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_matrix("sum", xv)?;
        let out = Tensor::scalar(xv.sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_matrix("mean", xv)?;
        let out = Tensor::scalar(xv.sum() / xv.numel() as f64);
        self.push("mean", out, Op::Mean(x), &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let xv = self.value(x);
        check_matrix("sum_axis", xv)?;
        let (m, n) = (xv.rows(), xv.cols());
        let out = match axis {
            Axis::Rows => {
                let mut acc = vec![0.0; n];
                for i in 0..m {
                    for (a, v) in acc.iter_mut().zip(xv.row(i)) {
                        *a += v;
                    }
                }
                Tensor::row_vector(acc)
            }
            Axis::Cols => {
                let sums = (0..m).map(|i| xv.row(i).iter().sum()).collect();
                Tensor::matrix(m, 1, sums)?
            }
        };
        self.push("sum_axis", out, Op::SumAxis(x, axis), &[x])
    }

    /// `max(v) + ln Σ exp(v - max(v))` along the given axis.
    pub fn log_sum_exp(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let xv = self.value(x);
        check_matrix("log_sum_exp", xv)?;
        let (m, n) = (xv.rows(), xv.cols());
        let out = match axis {
            Axis::Cols => {
                let v = (0..m).map(|i| log_sum_exp(xv.row(i).iter().copied())).collect();
                Tensor::matrix(m, 1, v)?
            }
            Axis::Rows => {
                let v = (0..n)
                    .map(|j| log_sum_exp((0..m).map(|i| xv.get(i, j))))
                    .collect();
                Tensor::row_vector(v)
            }
        };
        self.push("log_sum_exp", out, Op::LogSumExp(x, axis), &[x])
    }

    /// Row-wise `v - log_sum_exp(v)`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_matrix("log_softmax", xv)?;
        let mut out = xv.clone();
        for i in 0..xv.rows() {
            let lse = log_sum_exp(xv.row(i).iter().copied());
            for v in out.row_mut(i) {
                *v -= lse;
            }
        }
        self.push("log_softmax", out, Op::LogSoftmax(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        check_matrix("transpose", xv)?;
        let out = xv.transpose();
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    /// Extracts row `i` as a `1×n` matrix.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let xv = self.value(x);
        check_matrix("row", xv)?;
        if i >= xv.rows() {
            return Err(Error::dim("row", xv.shape(), &[i]));
        }
        let out = Tensor::row_vector(xv.row(i).to_vec());
        self.push("row", out, Op::Row(x, i), &[x])
    }

    /// Propagates `d root` back to every trainable leaf.
    ///
    /// Adjoints of a node feeding several consumers accumulate additively.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            adj[root.0] = Some(Tensor::new(rv.shape().to_vec(), vec![1.0])?);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj);
        }
        Ok(Gradients { grads: adj })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let y = &node.value;
        let elementwise = |x: &Tensor, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&xv, &yv), &gv)| f(xv, yv, gv))
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("elementwise gradient shape")
        };
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n as isize, 1), bv.data(), (1, n as isize), 0.0, &mut da);
                    self.accumulate(adj, a, Tensor::matrix(m, k, da).expect("matmul grad"));
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), (1, k as isize), g.data(), (n as isize, 1), 0.0, &mut db);
                    self.accumulate(adj, b, Tensor::matrix(k, n, db).expect("matmul grad"));
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(adj, x, g.clone());
                if self.requires_grad(row) {
                    let n = g.cols();
                    let mut acc = vec![0.0; n];
                    for i in 0..g.rows() {
                        for (a, v) in acc.iter_mut().zip(g.row(i)) {
                            *a += v;
                        }
                    }
                    self.accumulate(adj, row, Tensor::row_vector(acc));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, a, g.clone());
                self.accumulate(adj, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, a, g.clone());
                self.accumulate(adj, b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.requires_grad(a) {
                    let d = bv.data().iter().zip(g.data()).map(|(x, gv)| x * gv).collect();
                    self.accumulate(adj, a, Tensor::new(av.shape().to_vec(), d).expect("mul grad"));
                }
                if self.requires_grad(b) {
                    let d = av.data().iter().zip(g.data()).map(|(x, gv)| x * gv).collect();
                    self.accumulate(adj, b, Tensor::new(bv.shape().to_vec(), d).expect("mul grad"));
                }
            }
            Op::Scale(x, s) => self.accumulate(adj, x, g.map(|v| v * s)),
            Op::AddScalar(x) => self.accumulate(adj, x, g.clone()),
            Op::Neg(x) => self.accumulate(adj, x, g.map(|v| -v)),
            Op::Sigmoid(x) => {
                let d = elementwise(self.value(x), &|_, yv, gv| gv * yv * (1.0 - yv));
                self.accumulate(adj, x, d);
            }
            Op::Relu(x) => {
                let d = elementwise(self.value(x), &|xv, _, gv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(adj, x, d);
            }
            Op::Tanh(x) => {
                let d = elementwise(self.value(x), &|_, yv, gv| gv * (1.0 - yv * yv));
                self.accumulate(adj, x, d);
            }
            Op::Exp(x) => {
                let d = elementwise(self.value(x), &|_, yv, gv| gv * yv);
                self.accumulate(adj, x, d);
            }
            Op::Log(x) => {
                let d = elementwise(self.value(x), &|xv, _, gv| gv / xv);
                self.accumulate(adj, x, d);
            }
            Op::Square(x) => {
                let d = elementwise(self.value(x), &|xv, _, gv| 2.0 * xv * gv);
                self.accumulate(adj, x, d);
            }
            Op::Clamp(x, lo, hi) => {
                let d = elementwise(self.value(x), &|xv, _, gv| {
                    if (lo..=hi).contains(&xv) {
                        gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(adj, x, d);
            }
            Op::Sum(x) => {
                let xv = self.value(x);
                self.accumulate(adj, x, xv.map(|_| g.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(x);
                let s = g.item() / xv.numel() as f64;
                self.accumulate(adj, x, xv.map(|_| s));
            }
            Op::SumAxis(x, axis) => {
                let xv = self.value(x);
                let n = xv.cols();
                let mut d = xv.clone();
                for (idx, v) in d.data_mut().iter_mut().enumerate() {
                    let (i, j) = (idx / n, idx % n);
                    *v = match axis {
                        Axis::Rows => g.data()[j],
                        Axis::Cols => g.data()[i],
                    };
                }
                self.accumulate(adj, x, d);
            }
            Op::LogSumExp(x, axis) => {
                let xv = self.value(x);
                let n = xv.cols();
                let mut d = xv.clone();
                for (idx, v) in d.data_mut().iter_mut().enumerate() {
                    let (i, j) = (idx / n, idx % n);
                    let k = match axis {
                        Axis::Rows => j,
                        Axis::Cols => i,
                    };
                    *v = g.data()[k] * (*v - y.data()[k]).exp();
                }
                self.accumulate(adj, x, d);
            }
            Op::LogSoftmax(x) => {
                let mut d = g.clone();
                for i in 0..y.rows() {
                    let total: f64 = g.row(i).iter().sum();
                    for (dv, yv) in d.row_mut(i).iter_mut().zip(y.row(i)) {
                        *dv -= yv.exp() * total;
                    }
                }
                self.accumulate(adj, x, d);
            }
            Op::Transpose(x) => self.accumulate(adj, x, g.transpose()),
            Op::Row(x, r) => {
                let xv = self.value(x);
                let mut d = Tensor::zeros(xv.rows(), xv.cols());
                d.row_mut(r).copy_from_slice(g.data());
                self.accumulate(adj, x, d);
            }
        }
    }
}
