//! Reverse-mode differentiation over [`Tensor`] operations.
//!
//! Every differentiable operation appends one node to a [`Tape`]. A node keeps
//! its output value, which doubles as the saved intermediate for backward.
//! [`Tape::backward`] walks the nodes in exact reverse order of execution.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layers::{Param, ParamKey};
use crate::ops::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a tape.
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
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu { x: Var },
    Add { a: Var, b: Var },
    ScaleBy { x: Var, s: Var },
    ScaleConst { x: Var, k: T },
    MatMul { a: Var, trans_a: bool, b: Var, trans_b: bool },
    Softmax { x: Var },
    ToTokens { x: Var },
    FromTokens { t: Var },
    Pool { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    SquaredError { x: Var, target: Tensor<T> },
    Sum { x: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::ScaleBy { .. } => "scale_by",
            Op::ScaleConst { .. } => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Softmax { .. } => "softmax_rows",
            Op::ToTokens { .. } => "to_tokens",
            Op::FromTokens { .. } => "from_tokens",
            Op::Pool { .. } => "adaptive_avg_pool",
            Op::Concat { .. } => "concat",
            Op::SquaredError { .. } => "squared_error",
            Op::Sum { .. } => "sum",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of executed operations.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamKey, Var>,
    batch_stats: Vec<(ParamKey, ops::BatchStats<T>)>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamKey, Var>,
    shapes: Vec<Shape>,
    visited: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a recorded leaf; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }

    /// Gradient with respect to a parameter; zeros if it was never used.
    pub fn param(&self, p: &Param<T>) -> Tensor<T> {
        match self.params.get(&p.key()) {
            Some(&v) => self.wrt(v),
            None => Tensor::zeros(p.value.shape()),
        }
    }

    /// Overwrites `p.grad` with this gradient.
    pub fn store(&self, p: &mut Param<T>) {
        p.grad = self.param(p);
    }

    /// Node indices in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: HashMap::new(), batch_stats: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears the record so the tape can host a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.batch_stats.clear();
        self.consumed = false;
    }

    /// Stores training-mode batch statistics produced by the layer owning `key`.
    pub fn note_batch_stats(&mut self, key: ParamKey, stats: ops::BatchStats<T>) {
        self.batch_stats.push((key, stats));
    }

    pub fn batch_stats_for(&self, key: ParamKey) -> impl Iterator<Item = &ops::BatchStats<T>> {
        self.batch_stats.iter().filter(move |(k, _)| *k == key).map(|(_, s)| s)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Names of the recorded operations in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Activation pattern (`input > 0`) of every recorded ReLU, in order. Two
    /// passes with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::Tape("tape already differentiated; reset it before recording a new forward pass".into()));
        }
        value.check_finite(op.name())?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant or differentiable input.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf)
    }

    /// Records a parameter leaf. Registering the same parameter twice returns the same handle.
    pub fn param(&mut self, p: &Param<T>) -> Result<Var> {
        if let Some(&v) = self.params.get(&p.key()) {
            return Ok(v);
        }
        let v = self.push(p.value.clone(), Op::Leaf)?;
        self.params.insert(p.key(), v);
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data().to_vec());
        let y = ops::conv2d_forward(self.value(x), self.value(w), bias.as_deref(), &geom)?;
        self.push(y, Op::Conv { x, w, b, geom })
    }

    /// Batch norm using the batch's own statistics; returns them for running-stat updates.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, ops::BatchStats<T>)> {
        let (y, stats) = ops::batchnorm_train_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let v = self.push(
            y,
            Op::BatchNorm { x, gamma, beta, mean: stats.mean.clone(), inv_std: stats.inv_std.clone(), batch_stats: true },
        )?;
        Ok((v, stats))
    }

    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, running_mean: &[T], running_var: &[T], eps: T) -> Result<Var> {
        let y = ops::batchnorm_eval_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            eps,
        );
        let inv_std = running_var
            .iter()
            .map(|&v| if v + eps > T::zero() { T::one() / (v + eps).sqrt() } else { T::zero() })
            .collect();
        self.push(
            y,
            Op::BatchNorm { x, gamma, beta, mean: running_mean.to_vec(), inv_std, batch_stats: false },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu_forward(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        self.push(y, Op::Add { a, b })
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::config("scale_by expects a one-element scale"));
        }
        let k = self.value(s).data()[0];
        let y = self.value(x).scale(k);
        self.push(y, Op::ScaleBy { x, s })
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let y = self.value(x).scale(k);
        self.push(y, Op::ScaleConst { x, k })
    }

    pub fn matmul(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Result<Var> {
        let y = ops::matmul_forward(self.value(a), trans_a, self.value(b), trans_b)?;
        self.push(y, Op::MatMul { a, trans_a, b, trans_b })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_rows_forward(self.value(x))?;
        self.push(y, Op::Softmax { x })
    }

    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let y = ops::to_tokens(self.value(x));
        self.push(y, Op::ToTokens { x })
    }

    pub fn from_tokens(&mut self, t: Var, h: usize, w: usize) -> Result<Var> {
        let y = ops::from_tokens(self.value(t), h, w)?;
        self.push(y, Op::FromTokens { t })
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let y = ops::adaptive_avg_pool_forward(self.value(x), size)?;
        self.push(y, Op::Pool { x })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let y = {
            let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            ops::concat_forward(&refs, axis)?
        };
        self.push(y, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// `sum((x - target)^2)` as a one-element tensor.
    pub fn squared_error(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let v = self.value(x);
        v.expect_shape(target.shape(), "squared_error target")?;
        let s: T = v.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        self.push(Tensor::scalar(s), Op::SquaredError { x, target: target.clone() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// Propagates d(loss)/d(node) back to every recorded leaf.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Tape("backward called twice without a new forward pass".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!("loss must be a scalar, got shape {}", self.shape(loss))));
        }
        self.consumed = true;
        let count = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..count).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut visited = Vec::new();

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g).expect("gradient shapes agree"),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            visited.push(idx);
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, w, b, geom } => {
                    let (dx, dw, db) = ops::conv2d_backward(val(*x), val(*w), &dy, geom);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        let shape = val(*b).shape();
                        acc(&mut grads, *b, Tensor::from_vec(shape, db)?);
                    }
                }
                Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                    let (dx, dg, db) =
                        ops::batchnorm_backward(val(*x), &dy, val(*gamma).data(), mean, inv_std, *batch_stats);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, Tensor::from_vec(val(*gamma).shape(), dg)?);
                    acc(&mut grads, *beta, Tensor::from_vec(val(*beta).shape(), db)?);
                }
                Op::Relu { x } => {
                    let dx = ops::relu_backward(val(*x), &dy);
                    acc(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy);
                }
                Op::ScaleBy { x, s } => {
                    let k = val(*s).data()[0];
                    let ds: T = dy.data().iter().zip(val(*x).data()).map(|(&g, &v)| g * v).sum();
                    acc(&mut grads, *s, Tensor::from_vec(val(*s).shape(), vec![ds])?);
                    acc(&mut grads, *x, dy.scale(k));
                }
                Op::ScaleConst { x, k } => acc(&mut grads, *x, dy.scale(*k)),
                Op::MatMul { a, trans_a, b, trans_b } => {
                    let (da, db) = ops::matmul_backward(val(*a), *trans_a, val(*b), *trans_b, &dy);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Softmax { x } => {
                    let dx = ops::softmax_rows_backward(&node.value, &dy);
                    acc(&mut grads, *x, dx);
                }
                Op::ToTokens { x } => {
                    let s = val(*x).shape();
                    acc(&mut grads, *x, ops::from_tokens(&dy, s.h, s.w)?);
                }
                Op::FromTokens { t } => acc(&mut grads, *t, ops::to_tokens(&dy)),
                Op::Pool { x } => {
                    let dx = ops::adaptive_avg_pool_backward(val(*x).shape(), &dy);
                    acc(&mut grads, *x, dx);
                }
                Op::Concat { parts, axis } => {
                    let shapes: Vec<Shape> = parts.iter().map(|&p| val(p).shape()).collect();
                    for (p, g) in parts.iter().zip(ops::concat_backward(&shapes, *axis, &dy)) {
                        acc(&mut grads, *p, g);
                    }
                }
                Op::SquaredError { x, target } => {
                    let two = T::from_f64c(2.0) * dy.data()[0];
                    let dx = val(*x).zip_map(target, |a, b| two * (a - b))?;
                    acc(&mut grads, *x, dx);
                }
                Op::Sum { x } => {
                    let g = dy.data()[0];
                    acc(&mut grads, *x, Tensor::full(val(*x).shape(), g));
                }
            }
        }

        // only leaves keep their gradient
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            visited,
        })
    }
}
