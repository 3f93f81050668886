//! Forward and backward primitives composed by the RapidNet blocks.
//!
//! There is no autograd graph: each `*_backward` takes the forward inputs and
//! an upstream gradient and returns a [`GradResult`]; blocks chain these calls
//! in reverse order themselves.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

mod activation;
mod conv;
mod linear;
mod loss;
mod norm;
mod pool;

pub use activation::{gelu, gelu_backward, gelu_scalar};
pub use conv::{
    conv2d, conv2d_backward, conv2d_naive, effective_kernel, expand_dilated_kernel, out_shape,
    Conv2dLayer, ConvGeometry,
};
pub use linear::{linear, linear_backward, LinearLayer};
pub use loss::softmax_cross_entropy;
pub use norm::{batchnorm_backward, batchnorm_forward, BatchNorm2d, NormMode, BN_EPS, BN_MOMENTUM};
pub use pool::{global_avg_pool, global_avg_pool_backward};

/// Gradient of a scalar loss with respect to an op's input and parameters.
///
/// `grad_params` is keyed by the parameter's local name (`weight`, `bias`,
/// `gamma`, `beta`); each entry has the shape of the parameter it belongs to.
#[derive(Debug, Clone)]
pub struct GradResult<T> {
    pub grad_input: Tensor<T>,
    pub grad_params: BTreeMap<String, Tensor<T>>,
}
