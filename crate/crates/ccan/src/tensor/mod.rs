//! Dense tensors with reverse-mode automatic differentiation.
//!
//! All differentiable operations used by the network live on [`Tape`]: a
//! forward pass records operations, `backward` walks them in reverse and
//! accumulates gradients into bound [`Parameter`]s. Tensors and parameters
//! are plain values; a tape is used by one thread at a time while
//! independent tapes may run in parallel.

pub(crate) mod kernels;
mod optim;
mod tape;

pub use kernels::SquashKind;
pub use optim::{Optimizer, OptimizerKind, SgdConfig};
pub use tape::{NodeId, ParamBinding, Tape};

use crate::error::{Error, Result};

/// Scalar element type of tensors. The engine is generic so tests and
/// oracles run at 64-bit precision while training may run at 32-bit.
pub trait Real:
    num_traits::Float
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Precision label used in run reports ("f32" / "f64").
    fn label() -> &'static str;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn label() -> &'static str {
        "f32"
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn label() -> &'static str {
        "f64"
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense N-dimensional array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    numel(&shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&x| T::from_f64(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating zeros first if absent.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        let buf = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        for (a, b) in buf.iter_mut().zip(g) {
            *a = *a + *b;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// A named trainable tensor. Names are unique within a network.
#[derive(Debug, Clone)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, mut value: Tensor<T>) -> Self {
        value.requires_grad = true;
        Parameter {
            name: name.into(),
            value,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.value.grad()
    }

    pub fn zero_grad(&mut self) {
        self.value.zero_grad();
    }
}
