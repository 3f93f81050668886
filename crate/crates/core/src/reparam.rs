//! Structural reparameterization: fold the CPE skip into its depthwise
//! kernel and fold eval-mode batch norm into the preceding convolution.

use serde::Serialize;

use crate::blocks::{ConvBn, Cpe};
use crate::error::{Error, Result};
use crate::model::RapidNetModel;
use crate::ops::{BatchNorm2d, Conv2dLayer, NormMode};
use crate::tensor::{Rng, Scalar, Tensor};

/// Side length of the seeded check input used by [`reparameterize_model`].
pub const CHECK_RESOLUTION: usize = 64;
pub const CHECK_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FusionReport {
    pub fused_skips: usize,
    pub folded_bns: usize,
    pub max_abs_logit_diff: f64,
}

/// Returns `dw'` with `dw'(x) = x + dw(x)`.
pub fn fuse_identity_into_dw<T: Scalar>(dw: &Conv2dLayer<T>) -> Result<Conv2dLayer<T>> {
    let g = dw.geometry();
    let k = dw.kernel_size();
    let c = dw.out_channels();
    if !dw.is_depthwise() || dw.in_channels() != c {
        return Err(Error::InvalidFusion("skip fusion needs a depthwise conv".into()));
    }
    if k.is_multiple_of(2) {
        return Err(Error::InvalidFusion(format!("even kernel {k} has no centre tap")));
    }
    if g.stride != 1 || g.padding != g.dilation * (k - 1) / 2 {
        return Err(Error::InvalidFusion(format!(
            "skip fusion needs stride 1 and same padding, got {g:?}"
        )));
    }
    let mut w = dw.weight().clone();
    let centre = (k / 2) * k + k / 2;
    for ch in 0..c {
        let v = &mut w.data_mut()[ch * k * k + centre];
        *v = *v + T::one();
    }
    Conv2dLayer::new(w, dw.bias().cloned(), g)
}

/// Returns a conv computing `bn(conv(x))` with `bn` in eval mode.
pub fn fold_bn_into_conv<T: Scalar>(conv: &Conv2dLayer<T>, bn: &BatchNorm2d<T>) -> Result<Conv2dLayer<T>> {
    if bn.mode != NormMode::Eval {
        return Err(Error::InvalidState("cannot fold a batch norm in train mode".into()));
    }
    let c = conv.out_channels();
    if bn.channels() != c {
        return Err(Error::shape(format!(
            "batch norm has {} channels, conv has {c} outputs",
            bn.channels()
        )));
    }
    let per = conv.weight().numel() / c;
    let mut w = conv.weight().clone();
    let mut b = vec![T::zero(); c];
    for o in 0..c {
        let scale = bn.gamma.data()[o] / (bn.running_var.data()[o] + T::lit(bn.eps)).sqrt();
        for v in &mut w.data_mut()[o * per..(o + 1) * per] {
            *v = *v * scale;
        }
        let b0 = conv.bias().map_or(T::zero(), |t| t.data()[o]);
        b[o] = bn.beta.data()[o] + (b0 - bn.running_mean.data()[o]) * scale;
    }
    Conv2dLayer::new(w, Some(Tensor::from_vec(&[c], b)?), conv.geometry())
}

fn fold_unit<T: Scalar>(unit: &mut ConvBn<T>, n: &mut usize) -> Result<()> {
    if let Some(bn) = unit.bn.take() {
        unit.conv = fold_bn_into_conv(&unit.conv, &bn)?;
        *n += 1;
    }
    Ok(())
}

fn fuse_cpe<T: Scalar>(cpe: &mut Cpe<T>, n: &mut usize) -> Result<()> {
    if cpe.skip {
        cpe.conv = fuse_identity_into_dw(&cpe.conv)?;
        cpe.skip = false;
        *n += 1;
    }
    Ok(())
}

/// Applies every fusion to `model` in place; returns `(skips, bns)`.
pub(crate) fn fuse_in_place<T: Scalar>(model: &mut RapidNetModel<T>) -> Result<(usize, usize)> {
    if model.mode() != NormMode::Eval {
        return Err(Error::InvalidState("reparameterization needs an eval-mode model".into()));
    }
    let (mut skips, mut bns) = (0, 0);
    fold_unit(&mut model.stem.conv1, &mut bns)?;
    fold_unit(&mut model.stem.conv2, &mut bns)?;
    for st in &mut model.stages {
        if let Some(d) = &mut st.down {
            fold_unit(&mut d.unit, &mut bns)?;
        }
        for b in &mut st.irbs {
            fold_unit(&mut b.expand, &mut bns)?;
            fold_unit(&mut b.dw, &mut bns)?;
            fold_unit(&mut b.project, &mut bns)?;
        }
        for b in &mut st.dcbs {
            let m = &mut b.mldc;
            if let Some(cpe) = &mut m.cpe {
                fuse_cpe(cpe, &mut skips)?;
            }
            fold_unit(&mut m.pw_in, &mut bns)?;
            for br in &mut m.branches {
                fold_unit(br, &mut bns)?;
            }
            fold_unit(&mut m.pw_out, &mut bns)?;
            fold_unit(&mut b.ffn.dw, &mut bns)?;
            fold_unit(&mut b.ffn.fc2, &mut bns)?;
        }
    }
    model.config.fused = true;
    Ok((skips, bns))
}

/// Returns a fused copy of `model` plus a report comparing the logits of
/// both models on a seeded random input.
pub fn reparameterize_model<T: Scalar>(model: &RapidNetModel<T>) -> Result<(RapidNetModel<T>, FusionReport)> {
    let mut fused = model.clone();
    let (fused_skips, folded_bns) = fuse_in_place(&mut fused)?;
    let x = Tensor::randn(
        &[1, 3, CHECK_RESOLUTION, CHECK_RESOLUTION],
        &mut Rng::new(CHECK_SEED),
        0.0,
        1.0,
    )?;
    let diff = model.forward(&x)?.max_abs_diff(&fused.forward(&x)?)?;
    Ok((
        fused,
        FusionReport {
            fused_skips,
            folded_bns,
            max_abs_logit_diff: diff.to_f64().unwrap_or(f64::NAN),
        },
    ))
}
