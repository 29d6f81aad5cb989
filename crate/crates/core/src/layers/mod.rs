//! Layer primitives with explicit forward and backward passes.
//!
//! Each primitive exists twice: as free functions (`*_forward` /
//! `*_backward`) that take the cache explicitly, and as a stateful layer that
//! keeps its own cache between a train-mode forward and the matching backward.
//! Parameter gradients accumulate into [`Param::grad`] until cleared.

mod activation;
mod batchnorm;
mod conv;
mod init;
mod linear;
mod pool;

pub use activation::{leaky_relu, leaky_relu_backward, LeakyRelu, DEFAULT_LEAKY_SLOPE};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormGrads, BatchNormLayer,
    DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM,
};
pub use conv::{conv2d_backward, conv2d_forward, ConvCache, ConvGrads, ConvLayer};
pub use init::he_init;
pub use linear::{fully_connected, fully_connected_backward, LinearCache, LinearGrads, LinearLayer};
pub use pool::{max_pool, max_pool_backward, MaxPool, PoolCache};

use crate::tensor::Tensor;

/// Whether a forward pass records caches and uses batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether weight decay applies (conv/FC weights only).
    pub decay: bool,
}

impl Param {
    pub fn new(value: Tensor, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad, decay }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Named mutable handle on a parameter, as handed to the optimizer.
pub type ParamSlot<'a> = (String, &'a mut Param);

/// Anything that owns parameters in a fixed declaration order.
pub trait Parameterized {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamSlot<'a>>);

    fn params_mut(&mut self) -> Vec<ParamSlot<'_>> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
