//! Dense n-dimensional tensor value.
//!
//! Row-major flat storage, batch-channel-height-width axis order for image
//! tensors. A tensor optionally carries a gradient buffer of the same length
//! and a handle to the tape node it was last registered as.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorND<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    /// Populated by backward for registered leaves.
    pub grad: Option<Vec<S>>,
    /// Tape handle from the most recent registration, if any.
    pub node_id: Option<NodeId>,
}

impl<S: Scalar> TensorND<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::ShapeMismatch("tensor rank must be >= 1".into()));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} implies {numel} elements but buffer has {}",
                data.len()
            )));
        }
        Ok(TensorND { shape, data, grad: None, node_id: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert!(!shape.is_empty() && numel > 0, "zeros: invalid shape {shape:?}");
        TensorND { shape: shape.to_vec(), data: vec![S::zero(); numel], grad: None, node_id: None }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: S) -> Self {
        TensorND { shape: vec![1], data: vec![value], grad: None, node_id: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Single element of a [1]-shaped tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of {} elements", self.numel());
        self.data[0]
    }

    /// Reinterpret the buffer under a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64_c() - b.to_f64_c()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        TensorND {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            node_id: None,
        }
    }
}

/// Stack rank-3 [C,H,W] tensors into one [B,C,H,W] batch.
pub fn stack_batch<S: Scalar>(items: &[&TensorND<S>]) -> Result<TensorND<S>> {
    let first = items.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    if first.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "stack_batch expects rank-3 items, got rank {}",
            first.rank()
        )));
    }
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for item in items {
        if item.shape() != first.shape() {
            return Err(Error::ShapeMismatch(format!(
                "batch item shape {:?} differs from {:?}",
                item.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(item.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    TensorND::new(shape, data)
}
