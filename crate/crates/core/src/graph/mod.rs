//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends one node holding the op
//! kind, input node ids, the forward value, and whatever context backward
//! needs. Nodes reference strictly earlier nodes, so a single reverse sweep
//! visits each node exactly once. One backward pass is allowed per recorded
//! forward; recording a fresh graph is how a new step starts.

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod resample;

pub use norm::BnMode;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
pub use crate::tensor::NodeId;

use crate::tensor::TensorND;

pub(crate) enum Op<S> {
    Leaf,
    Constant,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
        dilation: usize,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// Normalized activations, saved for backward.
        x_hat: Vec<S>,
        /// Per-channel 1/sqrt(var + eps) actually used in the forward pass.
        inv_std: Vec<S>,
        mode: BnMode,
    },
    PixelShuffle { input: NodeId, factor: usize },
    BilinearUp { input: NodeId, scale: usize },
    Relu { input: NodeId },
    Sigmoid { input: NodeId },
    SoftmaxChannels { input: NodeId },
    Add { lhs: NodeId, rhs: NodeId },
    Sub { lhs: NodeId, rhs: NodeId },
    Mul { lhs: NodeId, rhs: NodeId },
    /// out = mul * x + add with scalar constants; add vanishes in backward.
    AffineConst { input: NodeId, mul: S },
    Log { input: NodeId },
    Clamp { input: NodeId, lo: S, hi: S },
    ConcatChannels { inputs: Vec<NodeId> },
    /// Contiguous channel range [start, start+len) of the input.
    SliceChannels { input: NodeId, start: usize, len: usize },
    Sum { input: NodeId },
    Mean { input: NodeId },
    MaxPool2 { input: NodeId, argmax: Vec<usize> },
    AvgPool { input: NodeId, k: usize },
    /// Extract the [H,W] plane at (batch, channel).
    Plane { input: NodeId, batch: usize, channel: usize },
    /// Stack r x r windows at stride `stride` into columns of a [r*r, L] matrix.
    Unfold { input: NodeId, r: usize, stride: usize },
    /// Subtract the mean of each row of a [d, L] matrix.
    CenterRows { input: NodeId },
    MatMul { lhs: NodeId, rhs: NodeId },
    Transpose { input: NodeId },
    /// Saved value is the inverse itself.
    MatInverse { input: NodeId },
    CholeskyLogdet {
        input: NodeId,
        /// Inverse of the symmetrized input, saved for backward.
        inverse: Vec<S>,
    },
}

pub(crate) struct Node<S> {
    pub op: Op<S>,
    pub value: TensorND<S>,
    pub grad: Option<Vec<S>>,
    pub requires_grad: bool,
}

pub struct Graph<S> {
    pub(crate) nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, tensor: &TensorND<S>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, tensor.clone(), requires_grad)
    }

    /// Register a constant; never receives gradient.
    pub fn constant(&mut self, tensor: TensorND<S>) -> NodeId {
        self.push(Op::Constant, tensor, false)
    }

    pub fn scalar_const(&mut self, v: S) -> NodeId {
        self.constant(TensorND::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> &TensorND<S> {
        &self.nodes[id].value
    }

    /// Gradient buffer of a node, if backward reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id].grad.as_deref()
    }

    /// Gradient of a leaf; zeros when the loss never touched it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<S> {
        match self.nodes[id].grad.as_ref() {
            Some(g) => g.clone(),
            None => vec![S::zero(); self.nodes[id].value.numel()],
        }
    }

    pub(crate) fn push(&mut self, op: Op<S>, value: TensorND<S>, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        let mut value = value;
        value.node_id = Some(id);
        self.nodes.push(Node { op, value, grad: None, requires_grad });
        id
    }

    pub(crate) fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub(crate) fn accumulate(&mut self, id: NodeId, contrib: &[S]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let numel = self.nodes[id].value.numel();
        debug_assert_eq!(numel, contrib.len());
        let grad = self.nodes[id].grad.get_or_insert_with(|| vec![S::zero(); numel]);
        for (g, &c) in grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    /// Reverse sweep from a scalar loss node. Populates gradients on every
    /// node the loss depends on. A second call without a new forward pass is
    /// rejected.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss].requires_grad {
            return Ok(());
        }
        self.nodes[loss].grad = Some(vec![S::one()]);
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[id].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            self.backprop(&op, id, &gout);
            self.nodes[id].op = op;
            self.nodes[id].grad = Some(gout);
        }
        Ok(())
    }

    fn backprop(&mut self, op: &Op<S>, id: NodeId, gout: &[S]) {
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Conv2d { input, weight, bias, stride, padding, dilation } => {
                self.conv2d_backward(*input, *weight, *bias, *stride, *padding, *dilation, id, gout)
            }
            Op::BatchNorm { input, gamma, beta, x_hat, inv_std, mode } => {
                self.batch_norm_backward(*input, *gamma, *beta, x_hat, inv_std, *mode, gout)
            }
            Op::PixelShuffle { input, factor } => self.pixel_shuffle_backward(*input, *factor, id, gout),
            Op::BilinearUp { input, scale } => self.bilinear_backward(*input, *scale, gout),
            Op::Relu { input } => self.relu_backward(*input, gout),
            Op::Sigmoid { input } => self.sigmoid_backward(*input, id, gout),
            Op::SoftmaxChannels { input } => self.softmax_backward(*input, id, gout),
            Op::Add { lhs, rhs } => {
                self.accumulate(*lhs, gout);
                self.accumulate(*rhs, gout);
            }
            Op::Sub { lhs, rhs } => {
                self.accumulate(*lhs, gout);
                let neg: Vec<S> = gout.iter().map(|&g| -g).collect();
                self.accumulate(*rhs, &neg);
            }
            Op::Mul { lhs, rhs } => self.mul_backward(*lhs, *rhs, gout),
            Op::AffineConst { input, mul } => {
                let contrib: Vec<S> = gout.iter().map(|&g| g * *mul).collect();
                self.accumulate(*input, &contrib);
            }
            Op::Log { input } => self.log_backward(*input, gout),
            Op::Clamp { input, lo, hi } => self.clamp_backward(*input, *lo, *hi, gout),
            Op::ConcatChannels { inputs } => self.concat_backward(inputs, id, gout),
            Op::SliceChannels { input, start, len } => {
                self.slice_channels_backward(*input, *start, *len, gout)
            }
            Op::Sum { input } => {
                let n = self.nodes[*input].value.numel();
                self.accumulate(*input, &vec![gout[0]; n]);
            }
            Op::Mean { input } => {
                let n = self.nodes[*input].value.numel();
                let g = gout[0] / S::from_f64_c(n as f64);
                self.accumulate(*input, &vec![g; n]);
            }
            Op::MaxPool2 { input, argmax } => self.max_pool2_backward(*input, argmax, gout),
            Op::AvgPool { input, k } => self.avg_pool_backward(*input, *k, gout),
            Op::Plane { input, batch, channel } => self.plane_backward(*input, *batch, *channel, gout),
            Op::Unfold { input, r, stride } => self.unfold_backward(*input, *r, *stride, gout),
            Op::CenterRows { input } => self.center_rows_backward(*input, gout),
            Op::MatMul { lhs, rhs } => self.matmul_backward(*lhs, *rhs, gout),
            Op::Transpose { input } => self.transpose_backward(*input, gout),
            Op::MatInverse { input } => self.mat_inverse_backward(*input, id, gout),
            Op::CholeskyLogdet { input, inverse } => {
                let contrib: Vec<S> = inverse.iter().map(|&v| v * gout[0]).collect();
                self.accumulate(*input, &contrib);
            }
        }
    }
}

/// Interpret a tensor as a batched image, treating rank 3 as batch size 1.
pub(crate) fn as_bchw(shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match shape.len() {
        3 => Ok((1, shape[0], shape[1], shape[2], false)),
        4 => Ok((shape[0], shape[1], shape[2], shape[3], true)),
        r => Err(Error::ShapeMismatch(format!(
            "expected rank 3 or 4 image tensor, got rank {r} shape {shape:?}"
        ))),
    }
}
