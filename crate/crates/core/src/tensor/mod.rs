//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! Training runs in `f32`. Every kernel is generic over [`Real`] so the same
//! code can be evaluated in `f64` when finite-difference checks need more
//! headroom than single precision offers.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{grad_check, max_relative_error};
pub use tape::{Tape, Var};

use std::fmt::Debug;

use thiserror::Error;

/// Clamp applied to probabilities before taking logarithms in [`Tape::kl_div`].
pub const KL_EPS: f64 = 1e-7;

/// Default epsilon for [`Tape::layer_norm`].
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid parameter: {msg}")]
    Param { op: &'static str, msg: String },
    #[error("{op}: invalid data: {msg}")]
    Data { op: &'static str, msg: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Floating point element type usable on a [`Tape`].
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn lit(v: f64) -> Self;
}

impl Real for f32 {
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn to_f32(self) -> f32 {
        self
    }
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn to_f32(self) -> f32 {
        self as f32
    }
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
}

/// Dense tensor with optional gradient storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Real = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(TensorError::Data {
                op: "tensor",
                msg: format!("zero-sized dimension in {shape:?} with {} values", data.len()),
            });
        }
        if numel != data.len() {
            return Err(TensorError::Data {
                op: "tensor",
                msg: format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// 1-D tensor owning `data`.
    pub fn vector(data: Vec<S>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<S>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(TensorError::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same values under a new shape with an identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Element-type conversion; drops any gradient.
    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| T::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(T::nan()))
                .collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}
