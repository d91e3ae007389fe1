//! Layer primitives with explicit forward and backward passes.
//!
//! Every function here is pure: outputs depend only on arguments, and
//! training-mode batch normalization returns its updated running statistics
//! instead of mutating them.

mod activation;
mod batchnorm;
mod conv;
mod gradcheck;
mod linear;
mod loss;
mod pool;

use std::collections::BTreeMap;

pub use activation::{elementwise_add, elementwise_add_backward, relu, relu_backward};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormOutput, BnMode, RunningStats,
    BN_EPSILON, BN_MOMENTUM,
};
pub use conv::{conv2d_backward, conv2d_forward, conv_output_dim, KernelShape};
pub use gradcheck::{grad_check, relative_error, GradReport};
pub use linear::{fully_connected, fully_connected_backward};
pub use loss::{sigmoid_multilabel_loss, softmax_cross_entropy, ClassTargets, LossOutput};
pub use pool::{
    avgpool_global, avgpool_global_backward, maxpool2x2, maxpool2x2_backward, MaxPoolOutput,
};

use crate::tensor::{Scalar, Tensor};

/// Gradients produced by one layer's backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad<T: Scalar = f32> {
    pub input_grad: Tensor<T>,
    /// Keyed by parameter role (`weight`, `bias`, `gamma`, `beta`).
    pub param_grads: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> LayerGrad<T> {
    pub fn input_only(input_grad: Tensor<T>) -> Self {
        LayerGrad {
            input_grad,
            param_grads: BTreeMap::new(),
        }
    }
}
