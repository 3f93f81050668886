use serde::{Deserialize, Serialize};

use super::{check_channels, visit_conv, visit_conv_mut, Block, ConvBn, ConvBnCache, MixerMode};
use crate::error::{Error, Result};
use crate::ops::{conv2d, conv2d_backward, gelu, gelu_backward, Conv2dLayer, ConvGeometry, NormMode};
use crate::params::{join, NamedTensors, ParamKind, Parameterized};
use crate::reparam::fuse_identity_into_dw;
use crate::tensor::{Rng, Scalar, Tensor};

pub const CPE_KERNEL: usize = 7;

/// Shape of the spatial mixer inside an MLDC block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerSpec {
    pub mode: MixerMode,
    pub kernel: usize,
    pub dilations: (usize, usize),
    pub use_cpe: bool,
    pub gelu_per_branch: bool,
}

impl Default for MixerSpec {
    fn default() -> Self {
        MixerSpec {
            mode: MixerMode::Mldc,
            kernel: 3,
            dilations: (2, 3),
            use_cpe: true,
            gelu_per_branch: false,
        }
    }
}

impl MixerSpec {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.dilations;
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "mixer kernel must be odd and positive, got {}",
                self.kernel
            )));
        }
        match self.mode {
            MixerMode::Mldc if a < 2 || b <= a => Err(Error::Config(format!(
                "mldc dilations must be strictly increasing and >= 2, got ({a}, {b})"
            ))),
            MixerMode::Sldc if b == 0 => Err(Error::Config("sldc dilation must be >= 1".into())),
            _ => Ok(()),
        }
    }

    /// `(kernel, dilation)` of each parallel branch.
    pub fn branches(&self) -> Vec<(usize, usize)> {
        match self.mode {
            MixerMode::Mldc => vec![(self.kernel, self.dilations.0), (self.kernel, self.dilations.1)],
            MixerMode::Sldc => vec![(self.kernel, self.dilations.1)],
            MixerMode::Conv3x3 => vec![(self.kernel, 1)],
            MixerMode::Pointwise => vec![(1, 1)],
        }
    }
}

pub(crate) fn branch_name(i: usize) -> String {
    format!("branch_{}", (b'a' + i as u8) as char)
}

/// Depthwise 7x7 positional encoding. With `skip` set it computes
/// `x + dw(x)`; once fused the identity lives in the kernel centre.
#[derive(Debug, Clone, PartialEq)]
pub struct Cpe<T> {
    pub conv: Conv2dLayer<T>,
    pub skip: bool,
}

impl<T: Scalar> Cpe<T> {
    pub fn new(channels: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Cpe {
            conv: Conv2dLayer::he_init(
                channels,
                channels,
                CPE_KERNEL,
                ConvGeometry::same(CPE_KERNEL, 1, channels),
                false,
                rng,
            )?,
            skip: true,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = conv2d(x, &self.conv)?;
        if self.skip {
            y.add(x)
        } else {
            Ok(y)
        }
    }
}

/// Which form of the CPE to evaluate: the explicit skip used in training or
/// the single fused depthwise conv used at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpeForm {
    Train,
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MldcBlock<T> {
    pub cpe: Option<Cpe<T>>,
    pub pw_in: ConvBn<T>,
    pub branches: Vec<ConvBn<T>>,
    pub pw_out: ConvBn<T>,
    pub gelu_per_branch: bool,
}

#[derive(Debug, Clone)]
pub struct MldcCache<T> {
    x: Tensor<T>,
    pw_in: ConvBnCache<T>,
    branches: Vec<ConvBnCache<T>>,
    pre_act: Vec<Tensor<T>>,
    pw_out: ConvBnCache<T>,
}

impl<T: Scalar> MldcBlock<T> {
    pub fn new(channels: usize, spec: &MixerSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let cpe = if spec.use_cpe {
            Some(Cpe::new(channels, rng)?)
        } else {
            None
        };
        let pw = ConvGeometry::default();
        let pw_in = ConvBn::init(channels, channels, 1, pw, rng)?;
        let branches = spec
            .branches()
            .into_iter()
            .map(|(k, d)| ConvBn::init(channels, channels, k, ConvGeometry::same(k, d, 1), rng))
            .collect::<Result<Vec<_>>>()?;
        let pw_out = ConvBn::init(channels, channels, 1, pw, rng)?;
        Ok(MldcBlock {
            cpe,
            pw_in,
            branches,
            pw_out,
            gelu_per_branch: spec.gelu_per_branch,
        })
    }

    pub fn channels(&self) -> usize {
        self.pw_in.conv.in_channels()
    }

    fn mix(&self, y0: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.pw_in.forward(y0)?;
        let mut z: Option<Tensor<T>> = None;
        for branch in &self.branches {
            let mut b = branch.forward(&y)?;
            if self.gelu_per_branch {
                b = gelu(&b);
            }
            z = Some(match z {
                Some(acc) => acc.add(&b)?,
                None => b,
            });
        }
        let mut z = z.ok_or_else(|| Error::InvalidState("mixer has no branches".into()))?;
        if !self.gelu_per_branch {
            z = gelu(&z);
        }
        self.pw_out.forward(&z)?.add(x)
    }
}

/// Evaluates the block with the CPE in the requested form. `Train` needs
/// the unfused skip; `Fused` folds the skip into the kernel on the fly when
/// the block has not been reparameterized yet.
pub fn mldc_forward<T: Scalar>(x: &Tensor<T>, block: &MldcBlock<T>, form: CpeForm) -> Result<Tensor<T>> {
    check_channels(x, block.channels(), "mldc block")?;
    let y0 = match (&block.cpe, form) {
        (None, _) => x.clone(),
        (Some(cpe), CpeForm::Train) => {
            if !cpe.skip {
                return Err(Error::InvalidState(
                    "cpe skip already fused; train form unavailable".into(),
                ));
            }
            cpe.forward(x)?
        }
        (Some(cpe), CpeForm::Fused) if cpe.skip => conv2d(x, &fuse_identity_into_dw(&cpe.conv)?)?,
        (Some(cpe), CpeForm::Fused) => conv2d(x, &cpe.conv)?,
    };
    block.mix(&y0, x)
}

impl<T: Scalar> Block<T> for MldcBlock<T> {
    type Cache = MldcCache<T>;

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_channels(x, self.channels(), "mldc block")?;
        let y0 = match &self.cpe {
            Some(cpe) => cpe.forward(x)?,
            None => x.clone(),
        };
        self.mix(&y0, x)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, MldcCache<T>)> {
        check_channels(x, self.channels(), "mldc block")?;
        let y0 = match &self.cpe {
            Some(cpe) => cpe.forward(x)?,
            None => x.clone(),
        };
        let (y, pw_in) = self.pw_in.forward_train(&y0)?;
        let mut branch_caches = Vec::with_capacity(self.branches.len());
        let mut pre_act = Vec::with_capacity(self.branches.len());
        for branch in &mut self.branches {
            let (b, c) = branch.forward_train(&y)?;
            branch_caches.push(c);
            pre_act.push(b);
        }
        let z = if self.gelu_per_branch {
            let mut acc = gelu(&pre_act[0]);
            for b in &pre_act[1..] {
                acc.add_assign(&gelu(b))?;
            }
            acc
        } else {
            let mut sum = pre_act[0].clone();
            for b in &pre_act[1..] {
                sum.add_assign(b)?;
            }
            let z = gelu(&sum);
            pre_act = vec![sum];
            z
        };
        let (p, pw_out) = self.pw_out.forward_train(&z)?;
        let out = p.add(x)?;
        Ok((
            out,
            MldcCache {
                x: x.clone(),
                pw_in,
                branches: branch_caches,
                pre_act,
                pw_out,
            },
        ))
    }

    fn backward(
        &self,
        cache: &MldcCache<T>,
        grad_out: &Tensor<T>,
        prefix: &str,
        grads: &mut NamedTensors<T>,
    ) -> Result<Tensor<T>> {
        let gz = self
            .pw_out
            .backward(&cache.pw_out, grad_out, &join(prefix, "pw_out"), grads)?;
        let shared = if self.gelu_per_branch {
            None
        } else {
            Some(gelu_backward(&cache.pre_act[0], &gz)?)
        };
        let mut gy: Option<Tensor<T>> = None;
        for (i, (branch, bc)) in self.branches.iter().zip(&cache.branches).enumerate() {
            let gb = match &shared {
                Some(g) => g.clone(),
                None => gelu_backward(&cache.pre_act[i], &gz)?,
            };
            let g = branch.backward(bc, &gb, &join(prefix, &branch_name(i)), grads)?;
            gy = Some(match gy {
                Some(acc) => acc.add(&g)?,
                None => g,
            });
        }
        let gy = gy.ok_or_else(|| Error::InvalidState("mixer has no branches".into()))?;
        let gy0 = self.pw_in.backward(&cache.pw_in, &gy, &join(prefix, "pw_in"), grads)?;
        let gx = match &self.cpe {
            Some(cpe) => {
                let r = conv2d_backward(&cache.x, &cpe.conv, &gy0)?;
                grads.absorb(&join(prefix, "cpe"), r.grad_params)?;
                if cpe.skip {
                    r.grad_input.add(&gy0)?
                } else {
                    r.grad_input
                }
            }
            None => gy0,
        };
        gx.add(grad_out)
    }

    fn set_mode(&mut self, mode: NormMode) {
        self.pw_in.set_mode(mode);
        for b in &mut self.branches {
            b.set_mode(mode);
        }
        self.pw_out.set_mode(mode);
    }
}

impl<T: Scalar> Parameterized<T> for MldcBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, ParamKind)) {
        if let Some(cpe) = &self.cpe {
            visit_conv(&cpe.conv, &join(prefix, "cpe"), f);
        }
        self.pw_in.visit_params(&join(prefix, "pw_in"), f);
        for (i, b) in self.branches.iter().enumerate() {
            b.visit_params(&join(prefix, &branch_name(i)), f);
        }
        self.pw_out.visit_params(&join(prefix, "pw_out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        if let Some(cpe) = &mut self.cpe {
            visit_conv_mut(&mut cpe.conv, &join(prefix, "cpe"), f);
        }
        self.pw_in.visit_params_mut(&join(prefix, "pw_in"), f);
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &branch_name(i)), f);
        }
        self.pw_out.visit_params_mut(&join(prefix, "pw_out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_weights<T: Scalar>(block: &mut MldcBlock<T>) {
        block.visit_params_mut("", &mut |name, t, _| {
            if name.ends_with("weight") || name.ends_with("bias") {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        });
    }

    fn random_stats(block: &mut MldcBlock<f64>, rng: &mut Rng) {
        block.visit_params_mut("", &mut |name, t, _| {
            let shape = t.shape().to_vec();
            if name.ends_with("running_var") {
                *t = Tensor::randn(&shape, rng, 0.0, 0.3).unwrap().map(|v: f64| 0.5 + v.abs());
            } else if name.contains(".bn.") || name.ends_with("bias") {
                *t = Tensor::randn(&shape, rng, 0.0, 0.3).unwrap();
            }
        });
    }

    #[test]
    fn zero_weights_is_identity() {
        let mut b = MldcBlock::<f32>::new(6, &MixerSpec::default(), &mut Rng::new(0)).unwrap();
        zero_weights(&mut b);
        let x = Tensor::randn(&[1, 6, 9, 9], &mut Rng::new(1), 0.0, 1.0).unwrap();
        assert_eq!(b.forward(&x).unwrap(), x);
        assert_eq!(mldc_forward(&x, &b, CpeForm::Fused).unwrap(), x);
    }

    #[test]
    fn preserves_shape() {
        let b = MldcBlock::<f32>::new(16, &MixerSpec::default(), &mut Rng::new(0)).unwrap();
        let x = Tensor::randn(&[1, 16, 7, 7], &mut Rng::new(1), 0.0, 1.0).unwrap();
        assert_eq!(mldc_forward(&x, &b, CpeForm::Train).unwrap().shape(), &[1, 16, 7, 7]);
        let x = Tensor::randn(&[2, 16, 3, 5], &mut Rng::new(1), 0.0, 1.0).unwrap();
        assert_eq!(b.forward(&x).unwrap().shape(), &[2, 16, 3, 5]);
    }

    #[test]
    fn channel_mismatch() {
        let b = MldcBlock::<f32>::new(4, &MixerSpec::default(), &mut Rng::new(0)).unwrap();
        let x = Tensor::zeros(&[1, 5, 8, 8]).unwrap();
        assert!(matches!(mldc_forward(&x, &b, CpeForm::Train), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn train_and_fused_forms_agree() {
        let mut rng = Rng::new(3);
        let mut b = MldcBlock::<f64>::new(8, &MixerSpec::default(), &mut rng).unwrap();
        random_stats(&mut b, &mut rng);
        let x = Tensor::randn(&[2, 8, 10, 10], &mut rng, 0.0, 1.0).unwrap();
        let t = mldc_forward(&x, &b, CpeForm::Train).unwrap();
        let f = mldc_forward(&x, &b, CpeForm::Fused).unwrap();
        assert!(t.max_abs_diff(&f).unwrap() < 1e-8);

        let b32 = MldcBlock::<f32>::new(8, &MixerSpec::default(), &mut Rng::new(4)).unwrap();
        let x = x.cast::<f32>();
        let t = mldc_forward(&x, &b32, CpeForm::Train).unwrap();
        let f = mldc_forward(&x, &b32, CpeForm::Fused).unwrap();
        assert!(t.max_abs_diff(&f).unwrap() < 1e-4);
    }

    #[test]
    fn train_form_needs_skip() {
        let mut b = MldcBlock::<f32>::new(4, &MixerSpec::default(), &mut Rng::new(0)).unwrap();
        let cpe = b.cpe.as_mut().unwrap();
        cpe.conv = fuse_identity_into_dw(&cpe.conv).unwrap();
        cpe.skip = false;
        let x = Tensor::zeros(&[1, 4, 8, 8]).unwrap();
        assert!(matches!(mldc_forward(&x, &b, CpeForm::Train), Err(Error::InvalidState(_))));
        assert!(mldc_forward(&x, &b, CpeForm::Fused).is_ok());
    }

    #[test]
    fn branch_swap_is_symmetric() {
        let mut rng = Rng::new(5);
        let spec = MixerSpec::default();
        let b = MldcBlock::<f64>::new(6, &spec, &mut rng).unwrap();
        let mut swapped = b.clone();
        swapped.branches.swap(0, 1);
        assert_eq!(swapped.branches[0].conv.geometry().dilation, 3);
        let x = Tensor::randn(&[1, 6, 11, 11], &mut rng, 0.0, 1.0).unwrap();
        let d = b.forward(&x).unwrap().max_abs_diff(&swapped.forward(&x).unwrap()).unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn mixer_modes_build_expected_branches() {
        let mut rng = Rng::new(0);
        let mut geo = |mode| {
            let spec = MixerSpec {
                mode,
                ..Default::default()
            };
            let b = MldcBlock::<f32>::new(4, &spec, &mut rng).unwrap();
            b.branches
                .iter()
                .map(|c| (c.conv.kernel_size(), c.conv.geometry().dilation))
                .collect::<Vec<_>>()
        };
        assert_eq!(geo(MixerMode::Mldc), vec![(3, 2), (3, 3)]);
        assert_eq!(geo(MixerMode::Sldc), vec![(3, 3)]);
        assert_eq!(geo(MixerMode::Conv3x3), vec![(3, 1)]);
        assert_eq!(geo(MixerMode::Pointwise), vec![(1, 1)]);
    }

    #[test]
    fn rejects_bad_dilations() {
        for d in [(1, 3), (3, 3), (3, 2)] {
            let spec = MixerSpec {
                dilations: d,
                ..Default::default()
            };
            assert!(matches!(spec.validate(), Err(Error::Config(_))));
        }
    }
}
