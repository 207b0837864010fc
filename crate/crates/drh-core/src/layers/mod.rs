//! The seven layer kernels the hashing network is assembled from, each with
//! a hand-written forward and backward pass.
//!
//! Backward passes accumulate into the owning [`Param`]'s `grad` buffer, so a
//! training step is: `zero_grads`, forward, backward, optimizer step. Every
//! kernel is deterministic for a fixed input regardless of thread count: data
//! parallelism only ever partitions disjoint output regions, never reduction
//! order.

mod activations;
mod batchnorm;
mod conv;
mod linear;
mod pool;

pub use activations::{
    relu_backward, relu_forward, residual_add, residual_backward, tanh_backward, tanh_forward,
    ReluCache, TanhCache,
};
pub use batchnorm::{BatchNorm2d, BnCache};
pub use conv::{Conv2d, ConvCache};
pub use linear::{Linear, LinearCache};
pub use pool::{global_avg_pool_backward, global_avg_pool_forward, GapCache};

use crate::tensor::{Element, Tensor};

/// Forward-pass mode. Train mode uses batch statistics in BatchNorm and
/// retains what backward needs; eval mode is a pure function of the input.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What a learnable tensor is, which decides its regularization treatment.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight,
    FcWeight,
    Bias,
    BnScale,
    BnShift,
}

impl ParamRole {
    /// Weight decay applies to conv/FC weights only, never to biases or
    /// BatchNorm affine terms.
    pub fn weight_decay(self) -> bool {
        matches!(self, ParamRole::ConvWeight | ParamRole::FcWeight)
    }
}

/// A learnable tensor with its gradient and momentum buffers.
#[derive(Clone, Debug)]
pub struct Param<E> {
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
    pub momentum: Tensor<E>,
    pub role: ParamRole,
}

impl<E: Element> Param<E> {
    pub fn zeros(shape: &[usize], role: ParamRole) -> Self {
        Param {
            value: Tensor::zeros(shape),
            grad: Tensor::zeros(shape),
            momentum: Tensor::zeros(shape),
            role,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(E::zero());
    }
}
