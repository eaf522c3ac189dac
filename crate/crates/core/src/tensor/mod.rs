//! Minimal dense-tensor math with reverse-mode automatic differentiation.
//!
//! Tensors are row-major `Vec`s with an explicit shape. All reductions run
//! in a fixed left-to-right order so that a given build on a given machine
//! produces bit-identical results for identical inputs.

pub mod kernels;
pub mod optim;
pub mod tape;

pub use optim::{adamw_step, AdamW, AdamWConfig};
pub use tape::{Tape, ValueId};

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Errors raised by tensor construction, tape operations, and the optimizer.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match buffer of {len} elements")]
    ShapeLenMismatch { shape: Vec<usize>, len: usize },
    #[error("softmax row {row} has no permitted entries")]
    DegenerateRow { row: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward was already called on this tape")]
    TapeConsumed,
    #[error("tape is empty")]
    EmptyTape,
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("index {index} out of bounds for dimension of size {size}")]
    IndexOutOfBounds { index: usize, size: usize },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    /// Populated by `Tape::backward` for parameter tensors.
    #[serde(skip)]
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(data: Vec<T>, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeLenMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); len],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<T>>) {
        if let Some(g) = &grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        self.grad = grad;
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[T] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Lossy cast between scalar widths (used by verification-mode tests).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(Scalar::to_f64(x)))
                .collect(),
            grad: None,
        }
    }
}
