//! Minimal tensor engine: exactly the layers the fused binary blocks need.
//!
//! Every kernel is a pair of explicit forward / backward functions over
//! row-major buffers. Layers that own parameters live in [`block`] and cache
//! what their backward pass needs during a training forward.

mod activation;
mod adam;
mod binary;
pub mod block;
mod conv;
mod linear;
mod loss;
mod norm;
mod pool;

pub use activation::{binarize, binarize_backward};
pub use adam::{AdamConfig, AdamState};
pub use binary::BinaryWeights;
pub use conv::{conv2d, conv3x3_backward_input, conv3x3_backward_weights, conv3x3_forward};
pub use linear::{
    fully_connected, linear_backward_input, linear_backward_params, linear_forward, FcWeights,
};
pub use loss::{one_hot, softmax, softmax_cross_entropy, softmax_rows, CrossEntropy};
pub use norm::{batch_norm, batch_norm_backward, BnCache, BnConfig, RunningStats};
pub use pool::{maxpool, maxpool_backward, maxpool_forward, pooled_extent};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Whether a forward pass uses batch statistics (and caches for backward) or
/// frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Dense row-major array with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    /// A trainable tensor with a zeroed gradient buffer.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        t.grad = Some(vec![T::zero(); t.data.len()]);
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.data.len());
        for (g, d) in self.grad_mut().iter_mut().zip(delta) {
            *g += *d;
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err(op, format!("expected NxCxHxW, got {:?}", self.shape))),
        }
    }

    /// `(n, d)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, d] => Ok((n, d)),
            _ => Err(shape_err(op, format!("expected NxD, got {:?}", self.shape))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Slice of the `i`-th item along the leading axis.
    pub fn row(&self, i: usize) -> &[T] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }
}
