//! Composite blocks of the network: conv stem, inverted residual block,
//! downsample, MLDC block, large-kernel FFN, dilated convolution block and
//! the classifier head.
//!
//! Every block offers a pure eval-mode `forward`, a train-mode
//! `forward_train` that records what its backward pass needs, and a
//! `backward` that chains the primitive backward ops in reverse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{
    batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward, BatchNorm2d, Conv2dLayer,
    ConvGeometry, NormMode,
};
use crate::params::{join, NamedTensors, ParamKind, Parameterized};
use crate::tensor::{Rng, Scalar, Tensor};

mod dcb;
mod head;
mod irb;
mod mldc;
pub(crate) use mldc::branch_name;
mod stem;

pub use dcb::{dcb_forward, DcbCache, DilatedConvBlock, LkFfnBlock, LkFfnCache, lkffn_forward};
pub use head::{head_forward, HeadBlock, HeadCache};
pub use irb::{downsample_forward, irb_forward, DownsampleBlock, InvertedResidualBlock, IrbCache};
pub use mldc::{mldc_forward, CpeForm, Cpe, MixerSpec, MldcBlock, MldcCache};
pub use stem::{stem_forward, StemBlock, StemCache};

/// Spatial mixer used inside the dilated convolution block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerMode {
    /// Two parallel dilated convolutions, summed.
    Mldc,
    /// One dilated convolution.
    Sldc,
    /// One undilated `k x k` convolution.
    Conv3x3,
    /// One 1x1 convolution.
    Pointwise,
}

impl std::str::FromStr for MixerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mldc" => Ok(MixerMode::Mldc),
            "sldc" => Ok(MixerMode::Sldc),
            "conv3x3" | "3x3" => Ok(MixerMode::Conv3x3),
            "pointwise" | "pw" => Ok(MixerMode::Pointwise),
            other => Err(Error::Config(format!("unknown mixer mode {other:?}"))),
        }
    }
}

/// Common surface of every composite block.
pub trait Block<T: Scalar>: Parameterized<T> {
    type Cache;

    /// Eval-mode forward; never mutates the block.
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Forward with each BN in its own mode, recording intermediates.
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Self::Cache)>;

    /// Returns the input gradient and accumulates parameter gradients into
    /// `grads` under `prefix`.
    fn backward(
        &self,
        cache: &Self::Cache,
        grad_out: &Tensor<T>,
        prefix: &str,
        grads: &mut NamedTensors<T>,
    ) -> Result<Tensor<T>>;

    fn set_mode(&mut self, mode: NormMode);
}

/// A bias-free convolution followed by batch norm. After BN folding the
/// `bn` slot is empty and the conv carries the affine transform as its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<T> {
    pub conv: Conv2dLayer<T>,
    pub bn: Option<BatchNorm2d<T>>,
}

#[derive(Debug, Clone)]
pub struct ConvBnCache<T> {
    input: Tensor<T>,
    conv_out: Option<Tensor<T>>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn init(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        geometry: ConvGeometry,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv2dLayer::he_init(in_c, out_c, kernel, geometry, false, rng)?,
            bn: Some(BatchNorm2d::new(out_c)?),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = conv2d(x, &self.conv)?;
        match &self.bn {
            Some(bn) => bn.forward_eval(&y),
            None => Ok(y),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvBnCache<T>)> {
        let y = conv2d(x, &self.conv)?;
        match &mut self.bn {
            Some(bn) => {
                let out = batchnorm_forward(&y, bn)?;
                Ok((
                    out,
                    ConvBnCache {
                        input: x.clone(),
                        conv_out: Some(y),
                    },
                ))
            }
            None => Ok((
                y,
                ConvBnCache {
                    input: x.clone(),
                    conv_out: None,
                },
            )),
        }
    }

    pub fn backward(
        &self,
        cache: &ConvBnCache<T>,
        grad_out: &Tensor<T>,
        prefix: &str,
        grads: &mut NamedTensors<T>,
    ) -> Result<Tensor<T>> {
        let grad_conv = match (&self.bn, &cache.conv_out) {
            (Some(bn), Some(y)) => {
                let r = batchnorm_backward(y, bn, grad_out)?;
                grads.absorb(&join(prefix, "bn"), r.grad_params)?;
                r.grad_input
            }
            (None, None) => grad_out.clone(),
            _ => return Err(Error::InvalidState("cache does not match layer structure".into())),
        };
        let r = conv2d_backward(&cache.input, &self.conv, &grad_conv)?;
        grads.absorb(prefix, r.grad_params)?;
        Ok(r.grad_input)
    }

    pub fn set_mode(&mut self, mode: NormMode) {
        if let Some(bn) = &mut self.bn {
            bn.mode = mode;
        }
    }
}

pub(crate) fn visit_conv<T: Scalar>(
    conv: &Conv2dLayer<T>,
    prefix: &str,
    f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind),
) {
    f(&join(prefix, "weight"), conv.weight(), ParamKind::Learnable);
    if let Some(b) = conv.bias() {
        f(&join(prefix, "bias"), b, ParamKind::Learnable);
    }
}

pub(crate) fn visit_conv_mut<T: Scalar>(
    conv: &mut Conv2dLayer<T>,
    prefix: &str,
    f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind),
) {
    f(&join(prefix, "weight"), conv.weight_mut(), ParamKind::Learnable);
    if let Some(b) = conv.bias_mut() {
        f(&join(prefix, "bias"), b, ParamKind::Learnable);
    }
}

impl<T: Scalar> Parameterized<T> for BatchNorm2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        f(&join(prefix, "gamma"), &self.gamma, ParamKind::Learnable);
        f(&join(prefix, "beta"), &self.beta, ParamKind::Learnable);
        f(&join(prefix, "running_mean"), &self.running_mean, ParamKind::Buffer);
        f(&join(prefix, "running_var"), &self.running_var, ParamKind::Buffer);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&join(prefix, "gamma"), &mut self.gamma, ParamKind::Learnable);
        f(&join(prefix, "beta"), &mut self.beta, ParamKind::Learnable);
        f(&join(prefix, "running_mean"), &mut self.running_mean, ParamKind::Buffer);
        f(&join(prefix, "running_var"), &mut self.running_var, ParamKind::Buffer);
    }
}

impl<T: Scalar> Parameterized<T> for ConvBn<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        visit_conv(&self.conv, prefix, f);
        if let Some(bn) = &self.bn {
            bn.visit_params(&join(prefix, "bn"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        visit_conv_mut(&mut self.conv, prefix, f);
        if let Some(bn) = &mut self.bn {
            bn.visit_params_mut(&join(prefix, "bn"), f);
        }
    }
}

pub(crate) fn check_channels<T: Scalar>(x: &Tensor<T>, expected: usize, what: &str) -> Result<()> {
    let (_, c, _, _) = x.dims4()?;
    if c != expected {
        return Err(Error::shape(format!("{what} expects {expected} channels, got {c}")));
    }
    Ok(())
}
