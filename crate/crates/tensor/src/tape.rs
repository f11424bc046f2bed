//! Operation recording and reverse-mode replay.
//!
//! Every op appends one node holding its output value and the handles of its
//! inputs, so node order is a topological order by construction. Backward
//! walks the nodes in exact reverse recording order.

use crate::error::{invalid, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Discriminant of a recorded op, used to name ops in reports and to select
/// the op whose backward rule the fault hook corrupts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Gelu,
    Reshape,
    Permute,
    Concat,
    Narrow,
    RepeatLeading,
    Sum,
    Mean,
    MatMul,
    Linear,
    Softmax,
    LayerNorm,
    BatchNorm,
    Conv2d,
    ConvTranspose2d,
    AvgPool2d,
    UpsampleNearest,
    MseLoss,
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Reshape(Var),
    Permute { input: Var, axes: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    RepeatLeading { input: Var, times: usize },
    Sum(Var),
    Mean(Var),
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: Var, gain: Var, shift: Var, xhat: Vec<T>, rstd: Vec<T>, batch_stats: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    AvgPool2d { x: Var, window: usize, stride: usize },
    UpsampleNearest { x: Var, factor: usize },
    MseLoss { pred: Var, target: Var },
}

impl<T> Op<T> {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::RepeatLeading { .. } => OpKind::RepeatLeading,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::AvgPool2d { .. } => OpKind::AvgPool2d,
            Op::UpsampleNearest { .. } => OpKind::UpsampleNearest,
            Op::MseLoss { .. } => OpKind::MseLoss,
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// A linear record of the forward computation.
///
/// A tape is single-threaded and is built fresh for every forward pass.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: scale the upstream gradient of every `kind` op by 1.5
    /// during backward, producing a wrong but plausible-looking gradient.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Records a leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, mut value: Tensor<T>, requires_grad: bool) -> Var {
        value.clear_grad();
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Returns the gradient of `loss` with respect to every leaf recorded via
    /// [`Tape::param`] that `loss` depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|x| *x *= T::lit(1.5));
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Adds `f`'s contribution into the gradient slot of `v` when `v`
    /// participates in differentiation.
    pub(crate) fn accumulate(
        &self,
        grads: &mut [Option<Vec<T>>],
        v: Var,
        f: impl FnOnce(&mut [T]),
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * s));
            }
            Op::Relu(a) => crate::ops::elementwise::relu_backward(self, *a, g, grads),
            Op::Gelu(a) => crate::ops::elementwise::gelu_backward(self, *a, g, grads),
            Op::Reshape(a) => self.accumulate(grads, *a, |d| add_into(d, g)),
            Op::Permute { input, axes } => {
                crate::ops::shape::permute_backward(self, *input, axes, g, grads)
            }
            Op::Concat { inputs, axis } => {
                crate::ops::shape::concat_backward(self, inputs, *axis, i, g, grads)
            }
            Op::Narrow { input, axis, start } => {
                crate::ops::shape::narrow_backward(self, *input, *axis, *start, i, g, grads)
            }
            Op::RepeatLeading { input, times } => {
                let chunk = self.value(*input).numel();
                let times = *times;
                self.accumulate(grads, *input, |d| {
                    for r in 0..times {
                        add_into(d, &g[r * chunk..(r + 1) * chunk]);
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::Mean(a) => {
                let g0 = g[0] / T::from_usize(self.value(*a).numel()).unwrap();
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::MatMul { a, b } => crate::ops::linalg::matmul_backward(self, *a, *b, g, grads),
            Op::Linear { x, w, b } => crate::ops::linalg::linear_backward(self, *x, *w, *b, g, grads),
            Op::Softmax(_) => crate::ops::norm::softmax_backward(self, i, g, grads),
            Op::LayerNorm { .. } => crate::ops::norm::layer_norm_backward(self, i, g, grads),
            Op::BatchNorm { .. } => crate::ops::norm::batch_norm_backward(self, i, g, grads),
            Op::Conv2d { .. } => crate::ops::conv::conv2d_backward(self, i, g, grads),
            Op::ConvTranspose2d { .. } => crate::ops::conv::conv_transpose2d_backward(self, i, g, grads),
            Op::AvgPool2d { .. } => crate::ops::conv::avg_pool2d_backward(self, i, g, grads),
            Op::UpsampleNearest { .. } => crate::ops::conv::upsample_nearest_backward(self, i, g, grads),
            Op::MseLoss { pred, target } => {
                let (p, t) = (self.data(*pred), self.data(*target));
                let c = T::lit(2.0) * g[0] / T::from_usize(p.len()).unwrap();
                self.accumulate(grads, *pred, |d| {
                    for ((d, &p), &t) in d.iter_mut().zip(p).zip(t) {
                        *d += c * (p - t);
                    }
                });
                self.accumulate(grads, *target, |d| {
                    for ((d, &p), &t) in d.iter_mut().zip(p).zip(t) {
                        *d -= c * (p - t);
                    }
                });
            }
        }
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(crate::error::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub(crate) fn check_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(invalid(op, format!("expected rank {rank}, got shape {:?}", self.shape(v))));
        }
        Ok(())
    }
}

pub(crate) fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` is a constant or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, all zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); tape.value(v).numel()])
    }
}
