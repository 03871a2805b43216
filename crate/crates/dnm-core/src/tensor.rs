//! Dense multi-dimensional `f64` value arrays.
//!
//! Shapes are always materialized: no broadcasting, no strided views.
//! Images and disparity maps use `[batch, channel, height, width]` order.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::Result;

/// A dense tensor with an optional gradient buffer.
///
/// The gradient slot is populated by [`crate::tape::Tape::backward`] for
/// tensors flagged with `requires_grad`; it always has the same shape as
/// the values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating that the value count matches the shape
    /// product and that all values are finite.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 {
            return Err(Error::BadShape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: "empty shapes are not supported",
            });
        }
        if values.len() != numel {
            return Err(Error::LengthMismatch {
                expected: numel,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "tensor construction",
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(&[1], vec![value])
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Interpret the shape as `[batch, channel, height, width]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::BadShape {
                op: "dims4",
                shape: self.shape.clone(),
                reason: "expected a rank-4 tensor",
            });
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        self.grad = grad;
    }

    pub(crate) fn grad_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.grad.as_mut()
    }

    /// Stack batch-1 tensors along the batch axis.
    pub fn stack_batch(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(Error::EmptyInput {
            what: "stack_batch of zero tensors",
        })?;
        let (b, c, h, w) = first.dims4()?;
        if b != 1 {
            return Err(Error::BadShape {
                op: "stack_batch",
                shape: first.shape.clone(),
                reason: "expected batch extent 1",
            });
        }
        let mut values = Vec::with_capacity(items.len() * first.numel());
        for item in items {
            if item.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    op: "stack_batch",
                    lhs: first.shape.clone(),
                    rhs: item.shape.clone(),
                });
            }
            values.extend_from_slice(item.values());
        }
        Tensor::new(&[items.len(), c, h, w], values)
    }
}

/// Flat index into a `[b, c, h, w]` tensor.
#[inline(always)]
pub fn idx4(c: usize, h: usize, w: usize, bi: usize, ci: usize, i: usize, j: usize) -> usize {
    ((bi * c + ci) * h + i) * w + j
}
