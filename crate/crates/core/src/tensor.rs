//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::num::Scalar;

/// Dense n-dimensional array in row-major order.
///
/// `grad`, when present, always has the same length as `values`; it is
/// populated by [`crate::graph::Graph::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if values.len() != expect {
            return Err(Error::Contract(format!(
                "shape {shape:?} expects {expect} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            values: vec![T::zero(); len],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// True for shape `[1]` tensors, the only scalar form the engine uses.
    pub fn is_scalar(&self) -> bool {
        self.shape == [1]
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    /// (rows, cols) if this is a matrix.
    pub fn as_matrix_dims(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }
}
