use std::cell::{Ref, RefCell};
use std::fmt;

use super::{gemm, Strided, Tensor};
use crate::error::{Error, Result};

/// Backward rule for an operation defined outside this module.
pub trait CustomOp {
    /// Gradient with respect to each input, given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `[B, n] + [n]`, the bias broadcast over the batch dimension.
    AddRow(usize, usize),
    Scale(usize, f64),
    Swish(usize),
    Relu(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    ConcatCols(Vec<usize>),
    Custom(Vec<usize>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations, replayed in reverse by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

/// dLoss/dNode for every node reached by the backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zero when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let rg = self.needs_grad(inputs);
        self.push(value, op, rg)
    }

    /// Tracked input; gradients flow into it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked input; gradients stop here.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
            Tensor::concat_cols(&refs)?
        };
        Ok(self.record(value, Op::ConcatCols(ids.clone()), &ids))
    }

    /// Records an operation whose value was computed by the caller.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        value: Tensor,
        op: impl CustomOp + 'static,
    ) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        self.record(value, Op::Custom(ids.clone(), Box::new(op)), &ids)
    }

    /// Reverse pass from a scalar `loss`. Each recorded operation up to the
    /// loss is visited once, newest first.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id].value;
        if !root.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| &nodes[i].value;
            let mut push = |i: usize, contrib: Tensor| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2()?;
                    let (_, n) = val(*b).dims2()?;
                    if nodes[*a].requires_grad {
                        let mut da = vec![0.0; m * k];
                        gemm(
                            m,
                            n,
                            k,
                            Strided::row_major(g.data(), n),
                            Strided::transposed(val(*b).data(), n),
                            &mut da,
                            0.0,
                        );
                        push(*a, Tensor::from_parts(vec![m, k], da));
                    }
                    if nodes[*b].requires_grad {
                        let mut db = vec![0.0; k * n];
                        gemm(
                            k,
                            m,
                            n,
                            Strided::transposed(val(*a).data(), k),
                            Strided::row_major(g.data(), n),
                            &mut db,
                            0.0,
                        );
                        push(*b, Tensor::from_parts(vec![k, n], db));
                    }
                }
                Op::Add(a, b) => {
                    push(*a, g.clone());
                    push(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    push(*b, g.scale(-1.0));
                    push(*a, g.clone());
                }
                Op::Mul(a, b) => {
                    push(*a, g.mul(val(*b))?);
                    push(*b, g.mul(val(*a))?);
                }
                Op::AddRow(x, bias) => {
                    let n = val(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    push(*bias, Tensor::from_parts(val(*bias).shape().to_vec(), db));
                    push(*x, g.clone());
                }
                Op::Scale(x, k) => push(*x, g.scale(*k)),
                Op::Swish(x) => {
                    let d = g.zip_map(val(*x), |gi, xi| {
                        let s = sigmoid(xi);
                        gi * (s + xi * s * (1.0 - s))
                    })?;
                    push(*x, d);
                }
                Op::Relu(x) => {
                    let d = g.zip_map(val(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 })?;
                    push(*x, d);
                }
                Op::Square(x) => {
                    let d = g.zip_map(val(*x), |gi, xi| 2.0 * xi * gi)?;
                    push(*x, d);
                }
                Op::Sum(x) => {
                    let gs = g.item()?;
                    push(*x, Tensor::full(val(*x).shape(), gs));
                }
                Op::Mean(x) => {
                    let xv = val(*x);
                    let gs = g.item()? / xv.len() as f64;
                    push(*x, Tensor::full(xv.shape(), gs));
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.row_len();
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).row_len();
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        push(p, Tensor::from_parts(val(p).shape().to_vec(), d));
                    }
                }
                Op::Custom(inputs, op) => {
                    let refs: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
                    let ds = op.backward(&refs, &node.value, &g);
                    for (&i, d) in inputs.iter().zip(ds) {
                        push(i, d);
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
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

/// `x * sigmoid(x)`.
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let v = f(&self.value())?;
        Ok(self.tape.record(v, op, &[self.id]))
    }

    fn binary(
        &self,
        other: Var<'t>,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        let v = f(&self.value(), &other.value())?;
        Ok(self.tape.record(v, op, &[self.id, other.id]))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a.add(b))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a.sub(b))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a.mul(b))
    }

    /// Adds a length-`n` bias to every row of a `[B, n]` matrix.
    pub fn add_row(&self, bias: Var<'t>) -> Result<Var<'t>> {
        self.binary(bias, Op::AddRow(self.id, bias.id), |x, b| {
            let n = b.len();
            if x.row_len() != n || x.shape().len() != 2 {
                return Err(Error::shape(format!(
                    "bias of length {n} cannot be added to shape {:?}",
                    x.shape()
                )));
            }
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(n) {
                for (o, bi) in row.iter_mut().zip(b.data()) {
                    *o += bi;
                }
            }
            Ok(out)
        })
    }

    pub fn scale(&self, k: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(self.id, k), |x| Ok(x.scale(k)))
    }

    pub fn swish(&self) -> Result<Var<'t>> {
        self.unary(Op::Swish(self.id), |x| Ok(x.map(swish)))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(Op::Relu(self.id), |x| Ok(x.map(|v| v.max(0.0))))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary(Op::Square(self.id), |x| Ok(x.map(|v| v * v)))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.unary(Op::Sum(self.id), |x| Ok(Tensor::scalar(x.sum())))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.unary(Op::Mean(self.id), |x| Ok(Tensor::scalar(x.mean())))
    }
}
