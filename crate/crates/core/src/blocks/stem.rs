use super::{Block, ConvBn, ConvBnCache};
use crate::error::{Error, Result};
use crate::ops::{gelu, gelu_backward, ConvGeometry, NormMode};
use crate::params::{join, NamedTensors, ParamKind, Parameterized};
use crate::tensor::{Rng, Scalar, Tensor};

/// Two stride-2 3x3 conv + BN + GeLU layers: `3 -> C/2 -> C`, 4x downsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct StemBlock<T> {
    pub conv1: ConvBn<T>,
    pub conv2: ConvBn<T>,
}

#[derive(Debug, Clone)]
pub struct StemCache<T> {
    c1: ConvBnCache<T>,
    a1: Tensor<T>,
    c2: ConvBnCache<T>,
    a2: Tensor<T>,
}

impl<T: Scalar> StemBlock<T> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut Rng) -> Result<Self> {
        let mid = out_channels / 2;
        if mid == 0 {
            return Err(Error::Config(format!(
                "stem width {out_channels} leaves no intermediate channels"
            )));
        }
        let g = ConvGeometry::strided(2, 1);
        Ok(StemBlock {
            conv1: ConvBn::init(in_channels, mid, 3, g, rng)?,
            conv2: ConvBn::init(mid, out_channels, 3, g, rng)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.conv.out_channels()
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        let (_, _, h, w) = x.dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::geometry(format!(
                "stem input {h}x{w} is not divisible by 4"
            )));
        }
        Ok(())
    }
}

/// `[N, 3, H, W] -> [N, C, H/4, W/4]`.
pub fn stem_forward<T: Scalar>(x: &Tensor<T>, stem: &StemBlock<T>) -> Result<Tensor<T>> {
    stem.forward(x)
}

impl<T: Scalar> Block<T> for StemBlock<T> {
    type Cache = StemCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let y = gelu(&self.conv1.forward(x)?);
        Ok(gelu(&self.conv2.forward(&y)?))
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, StemCache<T>)> {
        self.check(x)?;
        let (a1, c1) = self.conv1.forward_train(x)?;
        let (a2, c2) = self.conv2.forward_train(&gelu(&a1))?;
        let out = gelu(&a2);
        Ok((out, StemCache { c1, a1, c2, a2 }))
    }

    fn backward(
        &self,
        cache: &StemCache<T>,
        grad_out: &Tensor<T>,
        prefix: &str,
        grads: &mut NamedTensors<T>,
    ) -> Result<Tensor<T>> {
        let g = gelu_backward(&cache.a2, grad_out)?;
        let g = self.conv2.backward(&cache.c2, &g, &join(prefix, "conv2"), grads)?;
        let g = gelu_backward(&cache.a1, &g)?;
        self.conv1.backward(&cache.c1, &g, &join(prefix, "conv1"), grads)
    }

    fn set_mode(&mut self, mode: NormMode) {
        self.conv1.set_mode(mode);
        self.conv2.set_mode(mode);
    }
}

impl<T: Scalar> Parameterized<T> for StemBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduces_resolution_by_four() {
        let stem = StemBlock::<f32>::new(3, 32, &mut Rng::new(0)).unwrap();
        let x = Tensor::randn(&[1, 3, 224, 224], &mut Rng::new(1), 0.0, 1.0).unwrap();
        assert_eq!(stem_forward(&x, &stem).unwrap().shape(), &[1, 32, 56, 56]);
        let x = Tensor::randn(&[1, 3, 4, 4], &mut Rng::new(1), 0.0, 1.0).unwrap();
        assert_eq!(stem_forward(&x, &stem).unwrap().shape(), &[1, 32, 1, 1]);
    }

    #[test]
    fn rejects_indivisible_resolution() {
        let stem = StemBlock::<f32>::new(3, 8, &mut Rng::new(0)).unwrap();
        let x = Tensor::zeros(&[1, 3, 226, 224]).unwrap();
        assert!(matches!(stem_forward(&x, &stem), Err(Error::InvalidGeometry(_))));
    }
}
