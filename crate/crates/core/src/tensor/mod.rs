//! Dense row-major tensors and the reverse-mode tape that differentiates them.

mod gradcheck;
mod graph;

pub use gradcheck::finite_difference_check;
pub(crate) use graph::Op;
pub use graph::{ElementwiseOp, Graph, ReduceOp, Var};

use crate::Scalar;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid shape {0:?}: every extent must be positive")]
    InvalidShape(Vec<usize>),
    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable {0} was not recorded on this graph")]
    DetachedRoot(usize),
    #[error("finite-difference step must be positive")]
    InvalidStep,
    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),
    #[error("kernel {kernel} larger than padded input {input}")]
    KernelLargerThanInput { kernel: usize, input: usize },
    #[error("batch normalization needs more than one value per channel in train mode")]
    DegenerateBatch,
    #[error("probability {0} outside [0, 1)")]
    InvalidProbability(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
}

/// An n-dimensional array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], values: Vec<T>, requires_grad: bool) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape.to_vec()));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {shape:?} holds {numel} values, got {}",
                values.len()
            )));
        }
        let grad = requires_grad.then(|| vec![T::zero(); numel]);
        Ok(Self {
            shape: shape.to_vec(),
            data: values,
            requires_grad,
            grad,
        })
    }

    pub fn from_slice(shape: &[usize], values: &[T]) -> Result<Self, TensorError> {
        Self::new(shape, values.to_vec(), false)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n], false)
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n], false)
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Internal constructor for kernels whose output shape is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if on && self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it if needed.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length");
        let g = self.grad.get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (g, d) in g.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    pub(crate) fn accumulate_grad_owned(&mut self, delta: Vec<T>) {
        match &self.grad {
            None => {
                assert_eq!(delta.len(), self.data.len(), "gradient length");
                self.grad = Some(delta);
            }
            Some(_) => self.accumulate_grad(&delta),
        }
    }

    /// Same data under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape, self.data.clone(), false)
    }

    /// Detached copy without gradient state.
    pub fn detached(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        )
    }
}
