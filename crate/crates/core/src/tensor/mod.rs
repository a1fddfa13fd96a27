//! Dense row-major `f64` tensors and a per-pass reverse-mode tape.
//!
//! A [`Tensor`] is an immutable value (cheaply clonable, the buffer is shared)
//! that may carry a reference to the [`Tape`] node that produced it. All
//! differentiable operations live on [`Tape`]; calling [`Tape::backward`] on a
//! scalar yields [`Gradients`] for every reachable leaf that requires grad.

mod kernels;
mod tape;

pub use kernels::{gelu_scalar, gemm, Transpose};
pub(crate) use kernels::bce_logit_scalar;
pub use tape::{
    AttentionLayout, AttentionProbs, Gradients, KeySet, NodeRef, Tape,
};

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data. An empty shape is a scalar.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor::new", shape, &[data.len()]));
        }
        Ok(Self::from_parts(shape.to_vec(), Arc::new(data)))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), Arc::new(vec![value; numel]))
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), Arc::new(vec![value]))
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("tensor::from_rows", &[cols], &[bad.len()]));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(&[rows.len(), cols], data)
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape("tensor::item", &self.shape, &[1]));
        }
        Ok(self.data[0])
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Contract(format!(
                "expected a 2-D tensor, got shape {other:?}"
            ))),
        }
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.last_dim();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("tensor::set_grad", &self.shape, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// A copy of this value with no tape history.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            grad: None,
            node: None,
        }
    }

    /// Mutable access for in-place parameter updates. Drops the tape link,
    /// since the recorded value no longer matches.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.node = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and data.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn shared_data(&self) -> &Arc<Vec<f64>> {
        &self.data
    }

    pub(crate) fn attach(mut self, node: NodeRef, requires_grad: bool) -> Self {
        self.node = Some(node);
        self.requires_grad = requires_grad;
        self
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}
