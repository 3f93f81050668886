use crate::error::Result;
use crate::ops::{gelu, gelu_backward, global_avg_pool, global_avg_pool_backward, linear, linear_backward, LinearLayer};
use crate::params::{join, NamedTensors, ParamKind, Parameterized};
use crate::tensor::{Rng, Scalar, Tensor};

/// Global average pool, an optional hidden linear + GeLU, then the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadBlock<T> {
    pub hidden: Option<LinearLayer<T>>,
    pub fc: LinearLayer<T>,
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    input_shape: Vec<usize>,
    pooled: Tensor<T>,
    hidden_pre: Option<Tensor<T>>,
}

impl<T: Scalar> HeadBlock<T> {
    pub fn new(channels: usize, hidden: Option<usize>, classes: usize, rng: &mut Rng) -> Result<Self> {
        let (hidden, fc_in) = match hidden {
            Some(h) => (Some(LinearLayer::init(channels, h, rng)?), h),
            None => (None, channels),
        };
        Ok(HeadBlock {
            hidden,
            fc: LinearLayer::init(fc_in, classes, rng)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.fc.out_features()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut v = global_avg_pool(x)?;
        if let Some(h) = &self.hidden {
            v = gelu(&linear(&v, h)?);
        }
        linear(&v, &self.fc)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, HeadCache<T>)> {
        let pooled = global_avg_pool(x)?;
        let (feat, hidden_pre) = match &self.hidden {
            Some(h) => {
                let pre = linear(&pooled, h)?;
                (gelu(&pre), Some(pre))
            }
            None => (pooled.clone(), None),
        };
        let out = linear(&feat, &self.fc)?;
        Ok((
            out,
            HeadCache {
                input_shape: x.shape().to_vec(),
                pooled,
                hidden_pre,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &HeadCache<T>,
        grad_out: &Tensor<T>,
        prefix: &str,
        grads: &mut NamedTensors<T>,
    ) -> Result<Tensor<T>> {
        let feat = match &cache.hidden_pre {
            Some(pre) => gelu(pre),
            None => cache.pooled.clone(),
        };
        let r = linear_backward(&feat, &self.fc, grad_out)?;
        grads.absorb(&join(prefix, "fc"), r.grad_params)?;
        let mut g = r.grad_input;
        if let (Some(h), Some(pre)) = (&self.hidden, &cache.hidden_pre) {
            let gp = gelu_backward(pre, &g)?;
            let r = linear_backward(&cache.pooled, h, &gp)?;
            grads.absorb(&join(prefix, "hidden"), r.grad_params)?;
            g = r.grad_input;
        }
        global_avg_pool_backward(&g, &cache.input_shape)
    }
}

/// `[N, C, H, W] -> [N, classes]`.
pub fn head_forward<T: Scalar>(x: &Tensor<T>, head: &HeadBlock<T>) -> Result<Tensor<T>> {
    head.forward(x)
}

impl<T: Scalar> Parameterized<T> for HeadBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        if let Some(h) = &self.hidden {
            f(&join(prefix, "hidden.weight"), &h.weight, ParamKind::Learnable);
            f(&join(prefix, "hidden.bias"), &h.bias, ParamKind::Learnable);
        }
        f(&join(prefix, "fc.weight"), &self.fc.weight, ParamKind::Learnable);
        f(&join(prefix, "fc.bias"), &self.fc.bias, ParamKind::Learnable);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        if let Some(h) = &mut self.hidden {
            f(&join(prefix, "hidden.weight"), &mut h.weight, ParamKind::Learnable);
            f(&join(prefix, "hidden.bias"), &mut h.bias, ParamKind::Learnable);
        }
        f(&join(prefix, "fc.weight"), &mut self.fc.weight, ParamKind::Learnable);
        f(&join(prefix, "fc.bias"), &mut self.fc.bias, ParamKind::Learnable);
    }
}
