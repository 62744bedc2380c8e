//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation evaluates
//! eagerly and records its inputs, so node indices are already a topological
//! order. [`Graph::backward`] walks the arena in reverse, accumulating
//! gradients in that fixed order, which makes gradients bit-reproducible.
//!
//! ```
//! use tldpo::numerics::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(&g, x).item().unwrap(), 6.0);
//! ```

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    MaskedSum(Var, Tensor),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record plus the parameter registry.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn finite_or(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::Domain {
            op,
            detail: "result is not finite".into(),
        })
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

    /// Trainable leaf. Gradients are reported for it by [`Gradients::params`].
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push(v);
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.binary(a, b, finite_or("add", out)?, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.binary(a, b, finite_or("sub", out)?, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.binary(a, b, finite_or("mul", out)?, Op::Mul(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, finite_or("matmul", out)?, Op::MatMul(a, b)))
    }

    /// Adds a vector of length `m` to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.rank() != 2 || tb.rank() != 1 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("add_row", ta, tb));
        }
        let m = tb.len();
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        Ok(self.binary(a, bias, finite_or("add_row", out)?, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        Ok(self.unary(a, finite_or("scale", out)?, Op::Scale(a, c)))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        Ok(self.unary(a, finite_or("exp", out)?, Op::Exp(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("nonpositive argument {bad}"),
            });
        }
        let out = self.value(a).map(f64::ln);
        Ok(self.unary(a, out, Op::Log(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        Ok(self.unary(a, out, Op::Sigmoid(a)))
    }

    /// `log σ(a)`, computed without forming `σ(a)` so it stays finite for
    /// large negative inputs.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(log_sigmoid);
        Ok(self.unary(a, out, Op::LogSigmoid(a)))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_last();
        Ok(self.unary(a, finite_or("softmax", out)?, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).log_softmax_last();
        Ok(self.unary(a, finite_or("log_softmax", out)?, Op::LogSoftmax(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        Ok(self.unary(a, finite_or("sum", out)?, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        Ok(self.unary(a, finite_or("mean", out)?, Op::Mean(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.unary(a, out, Op::Transpose(a)))
    }

    /// Stacks rank-2 tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.value(*first).last_dim();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape()[1] != cols {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Selects rows of an `[n, m]` matrix; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(shape_err("gather_rows", t, t));
        }
        let (n, m) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            if i >= n {
                return Err(Error::Input(format!("gather_rows index {i} >= {n}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(idx.len(), m, data)?;
        Ok(self.unary(a, out, Op::GatherRows(a, idx.to_vec())))
    }

    /// Picks one entry per row: `out[i] = a[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || t.shape()[0] != idx.len() {
            return Err(Error::Shape {
                op: "pick",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let m = t.shape()[1];
        let mut data = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            if i >= m {
                return Err(Error::Input(format!("pick index {i} >= {m}")));
            }
            data.push(t.row(r)[i]);
        }
        let out = Tensor::vector(data);
        Ok(self.unary(a, out, Op::Pick(a, idx.to_vec())))
    }

    /// `Σ_i weights[i]·a[i]`; weights are a constant of `a`'s shape.
    pub fn masked_sum(&mut self, a: Var, weights: &Tensor) -> Result<Var> {
        let t = self.value(a);
        if t.shape() != weights.shape() {
            return Err(shape_err("masked_sum", t, weights));
        }
        let s: f64 = t.data().iter().zip(weights.data()).map(|(x, w)| x * w).sum();
        let out = finite_or("masked_sum", Tensor::scalar(s))?;
        Ok(self.unary(a, out, Op::MaskedSum(a, weights.clone())))
    }

    /// Propagates gradients from a scalar `loss` to every node that depends
    /// on a parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if rg(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::MatMul(a, b) => {
                if rg(*a) {
                    let bt = val(*b).transpose().expect("rank 2");
                    acc(*a, g.matmul(&bt).expect("conforming"));
                }
                if rg(*b) {
                    let at = val(*a).transpose().expect("rank 2");
                    acc(*b, at.matmul(g).expect("conforming"));
                }
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                if rg(*bias) {
                    let m = val(*bias).len();
                    let mut col = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (c, x) in col.iter_mut().zip(row) {
                            *c += x;
                        }
                    }
                    acc(*bias, Tensor::vector(col));
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, s| x * s * (1.0 - s))),
            Op::LogSigmoid(a) => acc(*a, g.zip_map(val(*a), |x, y| x * sigmoid(-y))),
            Op::Softmax(a) => {
                let c = node.value.last_dim();
                let mut out = g.clone();
                for (go, s) in out.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)) {
                    let dot: f64 = go.iter().zip(s).map(|(x, y)| x * y).sum();
                    for (x, y) in go.iter_mut().zip(s) {
                        *x = y * (*x - dot);
                    }
                }
                acc(*a, out);
            }
            Op::LogSoftmax(a) => {
                let c = node.value.last_dim();
                let mut out = g.clone();
                for (go, ls) in out.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)) {
                    let total: f64 = go.iter().sum();
                    for (x, l) in go.iter_mut().zip(ls) {
                        *x -= l.exp() * total;
                    }
                }
                acc(*a, out);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                acc(*a, Tensor::filled(val(*a).shape(), s));
            }
            Op::Mean(a) => {
                let t = val(*a);
                let s = g.data()[0] / t.len() as f64;
                acc(*a, Tensor::filled(t.shape(), s));
            }
            Op::Transpose(a) => acc(*a, g.transpose().expect("rank 2")),
            Op::ConcatRows(parts) => {
                let cols = g.last_dim();
                let mut offset = 0;
                for p in parts {
                    let rows = val(*p).shape()[0];
                    let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    offset += rows;
                    if rg(*p) {
                        acc(*p, Tensor::matrix(rows, cols, slice).expect("rows"));
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let src = val(*a);
                let m = src.shape()[1];
                let mut out = Tensor::zeros(src.shape());
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut out.data_mut()[i * m..(i + 1) * m];
                    for (d, x) in dst.iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                acc(*a, out);
            }
            Op::Pick(a, idx) => {
                let src = val(*a);
                let m = src.shape()[1];
                let mut out = Tensor::zeros(src.shape());
                for (r, &i) in idx.iter().enumerate() {
                    out.data_mut()[r * m + i] += g.data()[r];
                }
                acc(*a, out);
            }
            Op::MaskedSum(a, w) => {
                let s = g.data()[0];
                acc(*a, w.map(|x| x * s));
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, g: &Graph, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(t) => t.clone(),
            None => Tensor::zeros(g.value(v).shape()),
        }
    }

    /// Gradients of every registered parameter, in registration order.
    pub fn params(&self, g: &Graph) -> Vec<Tensor> {
        g.params().iter().map(|&p| self.wrt(g, p)).collect()
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

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
