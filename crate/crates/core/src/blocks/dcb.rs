use super::{check_channels, visit_conv, visit_conv_mut, Block, ConvBn, ConvBnCache, MixerSpec, MldcBlock, MldcCache};
use crate::error::Result;
use crate::ops::{conv2d, conv2d_backward, gelu, gelu_backward, Conv2dLayer, ConvGeometry, NormMode};
use crate::params::{join, NamedTensors, ParamKind, Parameterized};
use crate::tensor::{Rng, Scalar, Tensor};

pub const FFN_EXPANSION: usize = 4;
pub const FFN_KERNEL: usize = 7;

/// `x + BN(fc2(GeLU(fc1(BN(dw(x))))))`. With `large_kernel` off the
/// depthwise conv is 1x1.
#[derive(Debug, Clone, PartialEq)]
pub struct LkFfnBlock<T> {
    pub dw: ConvBn<T>,
    pub fc1: Conv2dLayer<T>,
    pub fc2: ConvBn<T>,
}

#[derive(Debug, Clone)]
pub struct LkFfnCache<T> {
    dw: ConvBnCache<T>,
    h: Tensor<T>,
    a: Tensor<T>,
    fc2: ConvBnCache<T>,
}

impl<T: Scalar> LkFfnBlock<T> {
    pub fn new(channels: usize, large_kernel: bool, rng: &mut Rng) -> Result<Self> {
        let k = if large_kernel { FFN_KERNEL } else { 1 };
        let hidden = channels * FFN_EXPANSION;
        let pw = ConvGeometry::default();
        Ok(LkFfnBlock {
            dw: ConvBn::init(channels, channels, k, ConvGeometry::same(k, 1, channels), rng)?,
            fc1: Conv2dLayer::he_init(channels, hidden, 1, pw, true, rng)?,
            fc2: ConvBn::init(hidden, channels, 1, pw, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.dw.conv.in_channels()
    }
}

pub fn lkffn_forward<T: Scalar>(x: &Tensor<T>, block: &LkFfnBlock<T>) -> Result<Tensor<T>> {
    block.forward(x)
}

impl<T: Scalar> Block<T> for LkFfnBlock<T> {
    type Cache = LkFfnCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_channels(x, self.channels(), "ffn block")?;
        let h = self.dw.forward(x)?;
        let a = gelu(&conv2d(&h, &self.fc1)?);
        self.fc2.forward(&a)?.add(x)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, LkFfnCache<T>)> {
        check_channels(x, self.channels(), "ffn block")?;
        let (h, dw) = self.dw.forward_train(x)?;
        let a = conv2d(&h, &self.fc1)?;
        let (p, fc2) = self.fc2.forward_train(&gelu(&a))?;
        Ok((p.add(x)?, LkFfnCache { dw, h, a, fc2 }))
    }

    fn backward(
        &self,
        cache: &LkFfnCache<T>,
        grad_out: &Tensor<T>,
        prefix: &str,
        grads: &mut NamedTensors<T>,
    ) -> Result<Tensor<T>> {
        let g = self.fc2.backward(&cache.fc2, grad_out, &join(prefix, "fc2"), grads)?;
        let g = gelu_backward(&cache.a, &g)?;
        let r = conv2d_backward(&cache.h, &self.fc1, &g)?;
        grads.absorb(&join(prefix, "fc1"), r.grad_params)?;
        let g = self.dw.backward(&cache.dw, &r.grad_input, &join(prefix, "dw"), grads)?;
        g.add(grad_out)
    }

    fn set_mode(&mut self, mode: NormMode) {
        self.dw.set_mode(mode);
        self.fc2.set_mode(mode);
    }
}

impl<T: Scalar> Parameterized<T> for LkFfnBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.dw.visit_params(&join(prefix, "dw"), f);
        visit_conv(&self.fc1, &join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.dw.visit_params_mut(&join(prefix, "dw"), f);
        visit_conv_mut(&mut self.fc1, &join(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&join(prefix, "fc2"), f);
    }
}

/// MLDC block followed by the FFN.
#[derive(Debug, Clone, PartialEq)]
pub struct DilatedConvBlock<T> {
    pub mldc: MldcBlock<T>,
    pub ffn: LkFfnBlock<T>,
}

#[derive(Debug, Clone)]
pub struct DcbCache<T> {
    mldc: MldcCache<T>,
    ffn: LkFfnCache<T>,
}

impl<T: Scalar> DilatedConvBlock<T> {
    pub fn new(channels: usize, spec: &MixerSpec, lk_ffn: bool, rng: &mut Rng) -> Result<Self> {
        Ok(DilatedConvBlock {
            mldc: MldcBlock::new(channels, spec, rng)?,
            ffn: LkFfnBlock::new(channels, lk_ffn, rng)?,
        })
    }
}

pub fn dcb_forward<T: Scalar>(x: &Tensor<T>, block: &DilatedConvBlock<T>) -> Result<Tensor<T>> {
    block.forward(x)
}

impl<T: Scalar> Block<T> for DilatedConvBlock<T> {
    type Cache = DcbCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.ffn.forward(&self.mldc.forward(x)?)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, DcbCache<T>)> {
        let (y, mldc) = self.mldc.forward_train(x)?;
        let (out, ffn) = self.ffn.forward_train(&y)?;
        Ok((out, DcbCache { mldc, ffn }))
    }

    fn backward(
        &self,
        cache: &DcbCache<T>,
        grad_out: &Tensor<T>,
        prefix: &str,
        grads: &mut NamedTensors<T>,
    ) -> Result<Tensor<T>> {
        let g = self.ffn.backward(&cache.ffn, grad_out, &join(prefix, "ffn"), grads)?;
        self.mldc.backward(&cache.mldc, &g, &join(prefix, "mldc"), grads)
    }

    fn set_mode(&mut self, mode: NormMode) {
        self.mldc.set_mode(mode);
        self.ffn.set_mode(mode);
    }
}

impl<T: Scalar> Parameterized<T> for DilatedConvBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        self.mldc.visit_params(&join(prefix, "mldc"), f);
        self.ffn.visit_params(&join(prefix, "ffn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.mldc.visit_params_mut(&join(prefix, "mldc"), f);
        self.ffn.visit_params_mut(&join(prefix, "ffn"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{irb_forward, downsample_forward, DownsampleBlock, InvertedResidualBlock};

    fn zero_weights<T: Scalar, P: Parameterized<T>>(p: &mut P) {
        p.visit_params_mut("", &mut |name, t, _| {
            if name.ends_with("weight") || name.ends_with("bias") {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        });
    }

    #[test]
    fn residual_passthrough() {
        let mut rng = Rng::new(0);
        let x = Tensor::randn(&[2, 8, 6, 6], &mut rng, 0.0, 1.0).unwrap();
        let mut ffn = LkFfnBlock::<f32>::new(8, true, &mut rng).unwrap();
        zero_weights(&mut ffn);
        assert_eq!(lkffn_forward(&x, &ffn).unwrap(), x);
        let mut irb = InvertedResidualBlock::<f32>::new(8, &mut rng).unwrap();
        zero_weights(&mut irb);
        assert_eq!(irb_forward(&x, &irb).unwrap(), x);
        let mut dcb = DilatedConvBlock::<f32>::new(8, &MixerSpec::default(), true, &mut rng).unwrap();
        zero_weights(&mut dcb);
        assert_eq!(dcb_forward(&x, &dcb).unwrap(), x);
    }

    #[test]
    fn shapes_follow_the_variant_tables() {
        let mut rng = Rng::new(0);
        let x = Tensor::randn(&[1, 112, 14, 14], &mut rng, 0.0, 1.0).unwrap();
        let irb = InvertedResidualBlock::<f32>::new(112, &mut rng).unwrap();
        assert_eq!(irb_forward(&x, &irb).unwrap().shape(), &[1, 112, 14, 14]);
        let dcb = DilatedConvBlock::<f32>::new(112, &MixerSpec::default(), true, &mut rng).unwrap();
        assert_eq!(dcb_forward(&x, &dcb).unwrap().shape(), &[1, 112, 14, 14]);
        let down = DownsampleBlock::<f32>::new(112, 224, &mut rng).unwrap();
        assert_eq!(downsample_forward(&x, &down).unwrap().shape(), &[1, 224, 7, 7]);
        let x = Tensor::randn(&[2, 160, 14, 14], &mut rng, 0.0, 1.0).unwrap();
        let ffn = LkFfnBlock::<f32>::new(160, true, &mut rng).unwrap();
        assert_eq!(lkffn_forward(&x, &ffn).unwrap().shape(), &[2, 160, 14, 14]);
    }

    #[test]
    fn small_kernel_ffn() {
        let ffn = LkFfnBlock::<f32>::new(4, false, &mut Rng::new(0)).unwrap();
        assert_eq!(ffn.dw.conv.kernel_size(), 1);
        assert!(ffn.dw.conv.is_depthwise());
    }

    #[test]
    fn channel_mismatch() {
        let ffn = LkFfnBlock::<f32>::new(4, true, &mut Rng::new(0)).unwrap();
        let x = Tensor::zeros(&[1, 3, 8, 8]).unwrap();
        assert!(lkffn_forward(&x, &ffn).is_err());
        let irb = InvertedResidualBlock::<f32>::new(4, &mut Rng::new(0)).unwrap();
        assert!(irb_forward(&x, &irb).is_err());
    }
}
