//! Pointwise ops, reductions, and channel concatenation.

use super::{as_bchw, Graph, Op};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{NodeId, TensorND};

impl<S: Scalar> Graph<S> {
    fn same_shape(&self, lhs: NodeId, rhs: NodeId, what: &str) -> Result<()> {
        let a = self.nodes[lhs].value.shape();
        let b = self.nodes[rhs].value.shape();
        if a != b {
            return Err(Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.same_shape(lhs, rhs, "add")?;
        let data: Vec<S> = self.nodes[lhs]
            .value
            .data()
            .iter()
            .zip(self.nodes[rhs].value.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let value = TensorND::new(self.nodes[lhs].value.shape().to_vec(), data)?;
        let rg = self.requires(&[lhs, rhs]);
        Ok(self.push(Op::Add { lhs, rhs }, value, rg))
    }

    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.same_shape(lhs, rhs, "sub")?;
        let data: Vec<S> = self.nodes[lhs]
            .value
            .data()
            .iter()
            .zip(self.nodes[rhs].value.data())
            .map(|(&a, &b)| a - b)
            .collect();
        let value = TensorND::new(self.nodes[lhs].value.shape().to_vec(), data)?;
        let rg = self.requires(&[lhs, rhs]);
        Ok(self.push(Op::Sub { lhs, rhs }, value, rg))
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.same_shape(lhs, rhs, "mul")?;
        let data: Vec<S> = self.nodes[lhs]
            .value
            .data()
            .iter()
            .zip(self.nodes[rhs].value.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let value = TensorND::new(self.nodes[lhs].value.shape().to_vec(), data)?;
        let rg = self.requires(&[lhs, rhs]);
        Ok(self.push(Op::Mul { lhs, rhs }, value, rg))
    }

    pub(super) fn mul_backward(&mut self, lhs: NodeId, rhs: NodeId, gout: &[S]) {
        if self.nodes[lhs].requires_grad {
            let contrib: Vec<S> =
                gout.iter().zip(self.nodes[rhs].value.data()).map(|(&g, &b)| g * b).collect();
            self.accumulate(lhs, &contrib);
        }
        if self.nodes[rhs].requires_grad {
            let contrib: Vec<S> =
                gout.iter().zip(self.nodes[lhs].value.data()).map(|(&g, &a)| g * a).collect();
            self.accumulate(rhs, &contrib);
        }
    }

    /// out = mul * x + add.
    pub fn affine(&mut self, input: NodeId, mul: S, add: S) -> NodeId {
        let value = self.nodes[input].value.map(|v| mul * v + add);
        let rg = self.requires(&[input]);
        self.push(Op::AffineConst { input, mul }, value, rg)
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self.nodes[input].value.map(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.requires(&[input]);
        self.push(Op::Relu { input }, value, rg)
    }

    pub(super) fn relu_backward(&mut self, input: NodeId, gout: &[S]) {
        let contrib: Vec<S> = gout
            .iter()
            .zip(self.nodes[input].value.data())
            .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
            .collect();
        self.accumulate(input, &contrib);
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let one = S::one();
        let value = self.nodes[input].value.map(|v| one / (one + (-v).exp()));
        let rg = self.requires(&[input]);
        self.push(Op::Sigmoid { input }, value, rg)
    }

    pub(super) fn sigmoid_backward(&mut self, input: NodeId, id: NodeId, gout: &[S]) {
        let contrib: Vec<S> = gout
            .iter()
            .zip(self.nodes[id].value.data())
            .map(|(&g, &y)| g * y * (S::one() - y))
            .collect();
        self.accumulate(input, &contrib);
    }

    pub fn log(&mut self, input: NodeId) -> NodeId {
        let value = self.nodes[input].value.map(|v| v.ln());
        let rg = self.requires(&[input]);
        self.push(Op::Log { input }, value, rg)
    }

    pub(super) fn log_backward(&mut self, input: NodeId, gout: &[S]) {
        let contrib: Vec<S> =
            gout.iter().zip(self.nodes[input].value.data()).map(|(&g, &x)| g / x).collect();
        self.accumulate(input, &contrib);
    }

    pub fn clamp(&mut self, input: NodeId, lo: S, hi: S) -> NodeId {
        let value = self.nodes[input].value.map(|v| v.max(lo).min(hi));
        let rg = self.requires(&[input]);
        self.push(Op::Clamp { input, lo, hi }, value, rg)
    }

    pub(super) fn clamp_backward(&mut self, input: NodeId, lo: S, hi: S, gout: &[S]) {
        let contrib: Vec<S> = gout
            .iter()
            .zip(self.nodes[input].value.data())
            .map(|(&g, &x)| if x >= lo && x <= hi { g } else { S::zero() })
            .collect();
        self.accumulate(input, &contrib);
    }

    /// Softmax over the channel axis of a [B,C,H,W] or [C,H,W] tensor.
    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.nodes[input].value.shape().to_vec();
        let (b, c, h, w, _) = as_bchw(&shape)?;
        let x = self.nodes[input].value.data();
        let mut data = vec![S::zero(); x.len()];
        let plane = h * w;
        for bi in 0..b {
            for p in 0..plane {
                let base = bi * c * plane + p;
                let mut maxv = x[base];
                for ci in 1..c {
                    let v = x[base + ci * plane];
                    if v > maxv {
                        maxv = v;
                    }
                }
                let mut denom = S::zero();
                for ci in 0..c {
                    let e = (x[base + ci * plane] - maxv).exp();
                    data[base + ci * plane] = e;
                    denom += e;
                }
                for ci in 0..c {
                    data[base + ci * plane] /= denom;
                }
            }
        }
        let value = TensorND::new(shape, data)?;
        let rg = self.requires(&[input]);
        Ok(self.push(Op::SoftmaxChannels { input }, value, rg))
    }

    pub(super) fn softmax_backward(&mut self, input: NodeId, id: NodeId, gout: &[S]) {
        let shape = self.nodes[id].value.shape().to_vec();
        let (b, c, h, w, _) = as_bchw(&shape).expect("validated in forward");
        let z = self.nodes[id].value.data();
        let mut contrib = vec![S::zero(); z.len()];
        let plane = h * w;
        for bi in 0..b {
            for p in 0..plane {
                let base = bi * c * plane + p;
                let mut dot = S::zero();
                for ci in 0..c {
                    let idx = base + ci * plane;
                    dot += gout[idx] * z[idx];
                }
                for ci in 0..c {
                    let idx = base + ci * plane;
                    contrib[idx] = z[idx] * (gout[idx] - dot);
                }
            }
        }
        self.accumulate(input, &contrib);
    }

    /// Concatenate along the channel axis. All inputs share batch and spatial extents.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.nodes[inputs[0]].value.shape().to_vec();
        let (b, _, h, w, batched) = as_bchw(&first)?;
        let mut c_total = 0usize;
        for &id in inputs {
            let s = self.nodes[id].value.shape();
            let (bi, ci, hi, wi, _) = as_bchw(s)?;
            if (bi, hi, wi) != (b, h, w) || s.len() != first.len() {
                return Err(Error::ShapeMismatch(format!(
                    "concat_channels: {s:?} incompatible with {first:?}"
                )));
            }
            c_total += ci;
        }
        let plane = h * w;
        let mut data = vec![S::zero(); b * c_total * plane];
        for bi in 0..b {
            let mut c_off = 0usize;
            for &id in inputs {
                let (_, ci, ..) = as_bchw(self.nodes[id].value.shape()).unwrap();
                let src = self.nodes[id].value.data();
                let src_base = bi * ci * plane;
                let dst_base = bi * c_total * plane + c_off * plane;
                data[dst_base..dst_base + ci * plane]
                    .copy_from_slice(&src[src_base..src_base + ci * plane]);
                c_off += ci;
            }
        }
        let shape =
            if batched { vec![b, c_total, h, w] } else { vec![c_total, h, w] };
        let value = TensorND::new(shape, data)?;
        let rg = self.requires(inputs);
        Ok(self.push(Op::ConcatChannels { inputs: inputs.to_vec() }, value, rg))
    }

    pub(super) fn concat_backward(&mut self, inputs: &[NodeId], id: NodeId, gout: &[S]) {
        let (b, c_total, h, w, _) = as_bchw(self.nodes[id].value.shape()).unwrap();
        let plane = h * w;
        let mut c_off = 0usize;
        for &inp in inputs {
            let (_, ci, ..) = as_bchw(self.nodes[inp].value.shape()).unwrap();
            if self.nodes[inp].requires_grad {
                let mut contrib = vec![S::zero(); b * ci * plane];
                for bi in 0..b {
                    let src_base = bi * c_total * plane + c_off * plane;
                    let dst_base = bi * ci * plane;
                    contrib[dst_base..dst_base + ci * plane]
                        .copy_from_slice(&gout[src_base..src_base + ci * plane]);
                }
                self.accumulate(inp, &contrib);
            }
            c_off += ci;
        }
    }

    /// Contiguous channel range [start, start+len) of a [B,C,H,W] tensor.
    pub fn slice_channels(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (b, c, h, w, batched) = as_bchw(self.nodes[input].value.shape())?;
        if len == 0 || start + len > c {
            return Err(Error::InvalidArgument(format!(
                "slice_channels [{start}, {}) out of range for {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let src = self.nodes[input].value.data();
        let mut data = vec![S::zero(); b * len * plane];
        for bi in 0..b {
            let src_base = (bi * c + start) * plane;
            let dst_base = bi * len * plane;
            data[dst_base..dst_base + len * plane]
                .copy_from_slice(&src[src_base..src_base + len * plane]);
        }
        let shape = if batched { vec![b, len, h, w] } else { vec![len, h, w] };
        let value = TensorND::new(shape, data)?;
        let rg = self.requires(&[input]);
        Ok(self.push(Op::SliceChannels { input, start, len }, value, rg))
    }

    pub(super) fn slice_channels_backward(
        &mut self,
        input: NodeId,
        start: usize,
        len: usize,
        gout: &[S],
    ) {
        let (b, c, h, w, _) = as_bchw(self.nodes[input].value.shape()).unwrap();
        let plane = h * w;
        let mut gx = vec![S::zero(); b * c * plane];
        for bi in 0..b {
            let dst_base = (bi * c + start) * plane;
            let src_base = bi * len * plane;
            gx[dst_base..dst_base + len * plane]
                .copy_from_slice(&gout[src_base..src_base + len * plane]);
        }
        self.accumulate(input, &gx);
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total: S = self.nodes[input].value.data().iter().copied().sum();
        let rg = self.requires(&[input]);
        self.push(Op::Sum { input }, TensorND::scalar(total), rg)
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let n = self.nodes[input].value.numel();
        let total: S = self.nodes[input].value.data().iter().copied().sum();
        let value = TensorND::scalar(total / S::from_f64_c(n as f64));
        let rg = self.requires(&[input]);
        self.push(Op::Mean { input }, value, rg)
    }
}
