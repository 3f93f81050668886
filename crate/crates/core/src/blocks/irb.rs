use super::{check_channels, Block, ConvBn, ConvBnCache};
use crate::error::Result;
use crate::ops::{gelu, gelu_backward, ConvGeometry, NormMode};
use crate::params::{join, NamedTensors, ParamKind, Parameterized};
use crate::tensor::{Rng, Scalar, Tensor};

pub const IRB_EXPANSION: usize = 4;

/// 1x1 expand (+BN, GeLU) -> 3x3 depthwise (+BN, GeLU) -> 1x1 project (+BN),
/// wrapped in a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedResidualBlock<T> {
    pub expand: ConvBn<T>,
    pub dw: ConvBn<T>,
    pub project: ConvBn<T>,
}

#[derive(Debug, Clone)]
pub struct IrbCache<T> {
    expand: ConvBnCache<T>,
    a1: Tensor<T>,
    dw: ConvBnCache<T>,
    a2: Tensor<T>,
    project: ConvBnCache<T>,
}

impl<T: Scalar> InvertedResidualBlock<T> {
    pub fn new(channels: usize, rng: &mut Rng) -> Result<Self> {
        let hidden = channels * IRB_EXPANSION;
        Ok(InvertedResidualBlock {
            expand: ConvBn::init(channels, hidden, 1, ConvGeometry::default(), rng)?,
            dw: ConvBn::init(hidden, hidden, 3, ConvGeometry::same(3, 1, hidden), rng)?,
            project: ConvBn::init(hidden, channels, 1, ConvGeometry::default(), rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.expand.conv.in_channels()
    }
}

pub fn irb_forward<T: Scalar>(x: &Tensor<T>, block: &InvertedResidualBlock<T>) -> Result<Tensor<T>> {
    block.forward(x)
}

impl<T: Scalar> Block<T> for InvertedResidualBlock<T> {
    type Cache = IrbCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_channels(x, self.channels(), "inverted residual block")?;
        let y = gelu(&self.expand.forward(x)?);
        let y = gelu(&self.dw.forward(&y)?);
        self.project.forward(&y)?.add(x)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, IrbCache<T>)> {
        check_channels(x, self.channels(), "inverted residual block")?;
        let (a1, expand) = self.expand.forward_train(x)?;
        let (a2, dw) = self.dw.forward_train(&gelu(&a1))?;
        let (p, project) = self.project.forward_train(&gelu(&a2))?;
        let out = p.add(x)?;
        Ok((
            out,
            IrbCache {
                expand,
                a1,
                dw,
                a2,
                project,
            },
        ))
    }

    fn backward(
        &self,
        cache: &IrbCache<T>,
        grad_out: &Tensor<T>,
        prefix: &str,
        grads: &mut NamedTensors<T>,
    ) -> Result<Tensor<T>> {
        let g = self
            .project
            .backward(&cache.project, grad_out, &join(prefix, "project"), grads)?;
        let g = gelu_backward(&cache.a2, &g)?;
        let g = self.dw.backward(&cache.dw, &g, &join(prefix, "dw"), grads)?;
        let g = gelu_backward(&cache.a1, &g)?;
        let g = self.expand.backward(&cache.expand, &g, &join(prefix, "expand"), grads)?;
        g.add(grad_out)
    }

    fn set_mode(&mut self, mode: NormMode) {
        self.expand.set_mode(mode);
        self.dw.set_mode(mode);
        self.project.set_mode(mode);
    }
}

impl<T: Scalar> Parameterized<T> for InvertedResidualBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.expand.visit_params(&join(prefix, "expand"), f);
        self.dw.visit_params(&join(prefix, "dw"), f);
        self.project.visit_params(&join(prefix, "project"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.expand.visit_params_mut(&join(prefix, "expand"), f);
        self.dw.visit_params_mut(&join(prefix, "dw"), f);
        self.project.visit_params_mut(&join(prefix, "project"), f);
    }
}

/// Stride-2 3x3 conv + BN between stages; no activation.
#[derive(Debug, Clone, PartialEq)]
pub struct DownsampleBlock<T> {
    pub unit: ConvBn<T>,
}

impl<T: Scalar> DownsampleBlock<T> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut Rng) -> Result<Self> {
        Ok(DownsampleBlock {
            unit: ConvBn::init(in_channels, out_channels, 3, ConvGeometry::strided(2, 1), rng)?,
        })
    }
}

pub fn downsample_forward<T: Scalar>(x: &Tensor<T>, block: &DownsampleBlock<T>) -> Result<Tensor<T>> {
    block.forward(x)
}

impl<T: Scalar> Block<T> for DownsampleBlock<T> {
    type Cache = ConvBnCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.unit.forward(x)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvBnCache<T>)> {
        self.unit.forward_train(x)
    }

    fn backward(
        &self,
        cache: &ConvBnCache<T>,
        grad_out: &Tensor<T>,
        prefix: &str,
        grads: &mut NamedTensors<T>,
    ) -> Result<Tensor<T>> {
        self.unit.backward(cache, grad_out, prefix, grads)
    }

    fn set_mode(&mut self, mode: NormMode) {
        self.unit.set_mode(mode);
    }
}

impl<T: Scalar> Parameterized<T> for DownsampleBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.unit.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.unit.visit_params_mut(prefix, f);
    }
}
