//! Reverse-mode differentiation on a linear tape.
//!
//! Forward calls append nodes; `backward` sweeps the tape once in reverse,
//! accumulating adjoints in tape order so results are bitwise reproducible.
//! Parameters are leaves created with [`Tape::param`]; every parameter gets
//! exactly one gradient, zero-filled if the output never touched it.

use crate::ops;
use crate::tensor::{numel_of, Real, Tensor};
use crate::{Error, Result};

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, Real),
    AxisMean(VarId, usize),
    MatMul(VarId, VarId),
    Reshape(VarId),
    Permute(VarId, Vec<usize>),
    DepthwiseConv3x3 { x: VarId, w: VarId, b: VarId },
    Conv2d { x: VarId, w: VarId, b: VarId, stride: usize, pad: usize },
    Linear { x: VarId, w: VarId, b: VarId },
    LayerNorm { x: VarId, gamma: VarId, beta: VarId, eps: Real },
    Gelu(VarId),
    Softmax(VarId, usize),
    AvgPool3x3(VarId),
    SpaceToDepth(VarId, usize),
    DepthToSpace(VarId, usize),
    Stack(Vec<VarId>),
    Sum(VarId),
    CrossEntropy { logits: VarId, labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    is_param: bool,
}

/// Gradients produced by one backward sweep, indexed by `VarId`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, is_param: bool) -> VarId {
        self.nodes.push(Node { value, op, needs_grad, is_param });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Leaf that does not require a gradient (inputs, constants).
    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(t, Op::Leaf, false, false)
    }

    /// Leaf that accumulates a gradient (parameters, checked inputs).
    pub fn param(&mut self, t: Tensor) -> VarId {
        self.push(t, Op::Leaf, true, true)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = ops::zip(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), self.needs(a) || self.needs(b), false))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = ops::zip(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), self.needs(a) || self.needs(b), false))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = ops::zip(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), self.needs(a) || self.needs(b), false))
    }

    pub fn scale(&mut self, a: VarId, c: Real) -> VarId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), self.needs(a), false)
    }

    pub fn axis_mean(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let v = ops::axis_mean(self.value(a), axis)?;
        Ok(self.push(v, Op::AxisMean(a, axis), self.needs(a), false))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), self.needs(a) || self.needs(b), false))
    }

    pub fn reshape(&mut self, a: VarId, new_shape: &[usize]) -> Result<VarId> {
        let t = self.value(a);
        if numel_of(new_shape) != t.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                t.shape(),
                new_shape
            )));
        }
        let v = Tensor::new(new_shape, t.data().to_vec())?;
        Ok(self.push(v, Op::Reshape(a), self.needs(a), false))
    }

    pub fn permute(&mut self, a: VarId, order: &[usize]) -> Result<VarId> {
        let v = ops::permute(self.value(a), order)?;
        Ok(self.push(v, Op::Permute(a, order.to_vec()), self.needs(a), false))
    }

    pub fn depthwise_conv3x3(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let v = ops::depthwise_conv3x3(self.value(x), self.value(w), self.value(b))?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(v, Op::DepthwiseConv3x3 { x, w, b }, ng, false))
    }

    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let v = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(v, Op::Conv2d { x, w, b, stride, pad }, ng, false))
    }

    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let v = ops::linear(self.value(x), self.value(w), self.value(b))?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(v, Op::Linear { x, w, b }, ng, false))
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: Real) -> Result<VarId> {
        let v = ops::layer_norm_cf(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, eps }, ng, false))
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let v = ops::gelu(self.value(a));
        self.push(v, Op::Gelu(a), self.needs(a), false)
    }

    pub fn softmax(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let v = ops::softmax(self.value(a), axis)?;
        Ok(self.push(v, Op::Softmax(a, axis), self.needs(a), false))
    }

    pub fn avgpool3x3(&mut self, a: VarId) -> Result<VarId> {
        let v = ops::avgpool3x3(self.value(a))?;
        Ok(self.push(v, Op::AvgPool3x3(a), self.needs(a), false))
    }

    pub fn space_to_depth(&mut self, a: VarId, s: usize) -> Result<VarId> {
        let v = ops::space_to_depth(self.value(a), s)?;
        Ok(self.push(v, Op::SpaceToDepth(a, s), self.needs(a), false))
    }

    pub fn depth_to_space(&mut self, a: VarId, s: usize) -> Result<VarId> {
        let v = ops::depth_to_space(self.value(a), s)?;
        Ok(self.push(v, Op::DepthToSpace(a, s), self.needs(a), false))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Shape("stack of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        let mut data = Vec::with_capacity(self.value(parts[0]).numel() * parts.len());
        for &p in parts {
            if self.value(p).shape() != first.as_slice() {
                return Err(Error::Shape(format!(
                    "stack of mismatched shapes {:?} vs {:?}",
                    first,
                    self.value(p).shape()
                )));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first);
        let ng = parts.iter().any(|&p| self.needs(p));
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::Stack(parts.to_vec()), ng, false))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: VarId) -> VarId {
        let total: Real = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), self.needs(a), false)
    }

    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let v = ops::cross_entropy(self.value(logits), labels)?;
        let ng = self.needs(logits);
        Ok(self.push(v, Op::CrossEntropy { logits, labels: labels.to_vec() }, ng, false))
    }

    /// Reverse sweep from `output`, seeded with `seed` (must match its shape).
    pub fn backward(&self, output: VarId, seed: &Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Numeric("backward on an empty tape".into()));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::Numeric("backward output is not on this tape".into()));
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::Shape(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut adjoint: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoint[output.0] = Some(seed.clone());

        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                adjoint[i] = None;
                continue;
            }
            let Some(g) = adjoint[i].clone() else { continue };
            let mut acc = |adj: &mut Vec<Option<Tensor>>, id: VarId, contrib: Tensor| {
                if !self.needs(id) {
                    return;
                }
                debug_assert_eq!(contrib.shape(), self.value(id).shape());
                match &mut adj[id.0] {
                    Some(t) => ops::add_in_place(t, &contrib),
                    slot => *slot = Some(contrib),
                }
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut adjoint, *a, g.clone());
                    acc(&mut adjoint, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adjoint, *a, g.clone());
                    acc(&mut adjoint, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let da = ops::zip(&g, self.value(*b), |gv, bv| gv * bv)?;
                    let db = ops::zip(&g, self.value(*a), |gv, av| gv * av)?;
                    acc(&mut adjoint, *a, da);
                    acc(&mut adjoint, *b, db);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut adjoint, *a, g.map(|v| v * c));
                }
                Op::AxisMean(a, axis) => {
                    let da = ops::axis_mean_vjp(&g, self.value(*a).shape(), *axis);
                    acc(&mut adjoint, *a, da);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let da = ops::matmul_vjp_a(&g, self.value(*b));
                        acc(&mut adjoint, *a, da);
                    }
                    if self.needs(*b) {
                        let db = ops::matmul_vjp_b(self.value(*a), &g);
                        acc(&mut adjoint, *b, db);
                    }
                }
                Op::Reshape(a) => {
                    let da = Tensor::new(self.value(*a).shape(), g.data().to_vec())?;
                    acc(&mut adjoint, *a, da);
                }
                Op::Permute(a, order) => {
                    let da = ops::permute(&g, &ops::invert_permutation(order))?;
                    acc(&mut adjoint, *a, da);
                }
                Op::DepthwiseConv3x3 { x, w, b } => {
                    let (dx, dw, db) = ops::depthwise_conv3x3_vjp(self.value(*x), self.value(*w), &g);
                    acc(&mut adjoint, *x, dx);
                    acc(&mut adjoint, *w, dw);
                    acc(&mut adjoint, *b, db);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) =
                        ops::conv2d_vjp(self.value(*x), self.value(*w), &g, *stride, *pad);
                    acc(&mut adjoint, *x, dx);
                    acc(&mut adjoint, *w, dw);
                    acc(&mut adjoint, *b, db);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_vjp(self.value(*x), self.value(*w), &g);
                    acc(&mut adjoint, *x, dx);
                    acc(&mut adjoint, *w, dw);
                    acc(&mut adjoint, *b, db);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (dx, dgamma, dbeta) =
                        ops::layer_norm_cf_vjp(self.value(*x), self.value(*gamma), *eps, &g);
                    acc(&mut adjoint, *x, dx);
                    acc(&mut adjoint, *gamma, dgamma);
                    acc(&mut adjoint, *beta, dbeta);
                }
                Op::Gelu(a) => {
                    let da = ops::gelu_vjp(self.value(*a), &g);
                    acc(&mut adjoint, *a, da);
                }
                Op::Softmax(a, axis) => {
                    let da = ops::softmax_vjp(&self.nodes[i].value, &g, *axis);
                    acc(&mut adjoint, *a, da);
                }
                Op::AvgPool3x3(a) => {
                    // The fixed /9 zero-padded average is self-adjoint.
                    let da = ops::avgpool3x3(&g)?;
                    acc(&mut adjoint, *a, da);
                }
                Op::SpaceToDepth(a, s) => {
                    let da = ops::depth_to_space(&g, *s)?;
                    acc(&mut adjoint, *a, da);
                }
                Op::DepthToSpace(a, s) => {
                    let da = ops::space_to_depth(&g, *s)?;
                    acc(&mut adjoint, *a, da);
                }
                Op::Stack(parts) => {
                    let part_n = self.value(parts[0]).numel();
                    let part_shape = self.value(parts[0]).shape().to_vec();
                    for (pi, &p) in parts.iter().enumerate() {
                        let slice = &g.data()[pi * part_n..(pi + 1) * part_n];
                        let da = Tensor::new(&part_shape, slice.to_vec())?;
                        acc(&mut adjoint, p, da);
                    }
                }
                Op::Sum(a) => {
                    let da = Tensor::full(self.value(*a).shape(), g.item());
                    acc(&mut adjoint, *a, da);
                }
                Op::CrossEntropy { logits, labels } => {
                    let da = ops::cross_entropy_vjp(self.value(*logits), labels, g.item());
                    acc(&mut adjoint, *logits, da);
                }
            }
            if !matches!(self.nodes[i].op, Op::Leaf) {
                adjoint[i] = None;
            }
        }

        // Every parameter reachable on the tape gets a gradient tensor.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param && adjoint[i].is_none() {
                adjoint[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: adjoint })
    }

    /// Backward from a rank-0 output with seed 1.
    pub fn backward_scalar(&self, output: VarId) -> Result<Gradients> {
        self.backward(output, &Tensor::scalar(1.0))
    }
}
