//! Numerical checks shared by the test suites and `rapidnet verify`:
//! central finite differences against the analytic backward passes,
//! optimized vs naive convolution, and pre/post fusion logits.

use serde::Serialize;

use crate::blocks::{Block, DilatedConvBlock, InvertedResidualBlock, LkFfnBlock, MixerSpec, MldcBlock, StemBlock};
use crate::blocks::{DownsampleBlock, HeadBlock};
use crate::error::Result;
use crate::model::RapidNetModel;
use crate::ops::{
    batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward, conv2d_naive, gelu, gelu_backward,
    global_avg_pool, global_avg_pool_backward, linear, linear_backward, softmax_cross_entropy, BatchNorm2d,
    Conv2dLayer, ConvGeometry, LinearLayer, NormMode,
};
use crate::params::{NamedTensors, ParamKind, Parameterized};
use crate::reparam::reparameterize_model;
use crate::tensor::{Rng, Scalar, Tensor};

/// Finite-difference step for `f64` checks.
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const ORACLE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    pub fn new(name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        CheckOutcome {
            name: name.into(),
            error,
            tolerance,
            passed: error.is_finite() && error < tolerance,
        }
    }
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute norm when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(f: &mut dyn FnMut(&Tensor<f64>) -> Result<f64>, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>> {
    let mut g = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let v = x.data()[i];
        probe.data_mut()[i] = v + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = v - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = v;
        g.push((up - down) / (2.0 * h));
    }
    Tensor::from_vec(x.shape(), g)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Perturbs every learnable tensor and BN buffer of `p` so that checks do
/// not run at the special point of fresh initialization.
pub fn jitter_params<T: Scalar, P: Parameterized<T> + ?Sized>(p: &mut P, rng: &mut Rng) {
    p.visit_params_mut("", &mut |name, t, _| {
        for v in t.data_mut() {
            let n = rng.standard_normal();
            let x = if name.ends_with("running_var") {
                0.5 + 0.5 * n.abs()
            } else if name.ends_with("gamma") {
                1.0 + 0.2 * n
            } else if name.ends_with("bias") || name.ends_with("beta") || name.ends_with("running_mean") {
                0.1 * n
            } else {
                v.to_f64().unwrap_or(0.0) + 0.05 * n
            };
            *v = T::lit(x);
        }
    });
}

fn set_element<P: Parameterized<f64>>(p: &mut P, target: &str, i: usize, value: f64) {
    p.visit_params_mut("", &mut |name, t, _| {
        if name == target {
            t.data_mut()[i] = value;
        }
    });
}

/// Checks the input gradient and every parameter gradient of `block` in
/// train mode against finite differences of `sum(block(x) * r)`.
pub fn check_block<B>(label: &str, block: &B, x: &Tensor<f64>, seed: u64) -> Result<Vec<CheckOutcome>>
where
    B: Block<f64> + Clone,
{
    let mut block = block.clone();
    block.set_mode(NormMode::Train);
    let mut rng = Rng::new(seed);
    let (out, cache) = block.clone().forward_train(x)?;
    let r = Tensor::randn(out.shape(), &mut rng, 0.0, 1.0)?;
    let mut grads = NamedTensors::new();
    let gx = block.backward(&cache, &r, "", &mut grads)?;

    let mut outcomes = Vec::new();
    let mut loss_x = |xi: &Tensor<f64>| -> Result<f64> { Ok(dot(&block.clone().forward_train(xi)?.0, &r)) };
    let nx = numeric_gradient(&mut loss_x, x, FD_STEP)?;
    outcomes.push(CheckOutcome::new(
        format!("{label}/input"),
        relative_error(gx.data(), nx.data()),
        GRAD_TOLERANCE,
    ));

    let mut learnables = Vec::new();
    block.visit_params("", &mut |name, t, kind| {
        if kind == ParamKind::Learnable {
            learnables.push((name.to_string(), t.clone()));
        }
    });
    for (name, value) in learnables {
        let analytic = grads.require(&name)?.clone();
        let mut numeric = Vec::with_capacity(value.numel());
        for i in 0..value.numel() {
            let v = value.data()[i];
            let eval = |delta: f64| -> Result<f64> {
                let mut b = block.clone();
                set_element(&mut b, &name, i, v + delta);
                Ok(dot(&b.forward_train(x)?.0, &r))
            };
            numeric.push((eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP));
        }
        outcomes.push(CheckOutcome::new(
            format!("{label}/{name}"),
            relative_error(analytic.data(), &numeric),
            GRAD_TOLERANCE,
        ));
    }
    Ok(outcomes)
}

fn op_check(
    name: &str,
    analytic: &Tensor<f64>,
    f: &mut dyn FnMut(&Tensor<f64>) -> Result<f64>,
    at: &Tensor<f64>,
) -> Result<CheckOutcome> {
    let numeric = numeric_gradient(f, at, FD_STEP)?;
    Ok(CheckOutcome::new(
        name,
        relative_error(analytic.data(), numeric.data()),
        GRAD_TOLERANCE,
    ))
}

/// Gradient checks of every primitive backward op.
pub fn op_gradient_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();

    let geometries = [
        ("conv3x3", 4, 3, ConvGeometry::same(3, 1, 1)),
        ("conv3x3_d2", 4, 3, ConvGeometry::same(3, 2, 1)),
        ("conv3x3_d3", 4, 3, ConvGeometry::same(3, 3, 1)),
        ("conv3x3_s2", 4, 3, ConvGeometry::strided(2, 1)),
        ("conv1x1", 4, 1, ConvGeometry::default()),
        ("dw7x7", 4, 7, ConvGeometry::same(7, 1, 4)),
        ("dw3x3_d2_s2", 4, 3, ConvGeometry { stride: 2, padding: 2, dilation: 2, groups: 4 }),
    ];
    for (name, c, k, geo) in geometries {
        let mut layer = Conv2dLayer::<f64>::he_init(c, c, k, geo, true, &mut rng)?;
        if let Some(b) = layer.bias_mut() {
            *b = Tensor::randn(&[c], &mut rng, 0.0, 0.1)?;
        }
        let x = Tensor::randn(&[2, c, 8, 8], &mut rng, 0.0, 1.0)?;
        let y = conv2d(&x, &layer)?;
        let r = Tensor::randn(y.shape(), &mut rng, 0.0, 1.0)?;
        let g = conv2d_backward(&x, &layer, &r)?;
        out.push(op_check(
            &format!("{name}/input"),
            &g.grad_input,
            &mut |xi| Ok(dot(&conv2d(xi, &layer)?, &r)),
            &x,
        )?);
        out.push(op_check(
            &format!("{name}/weight"),
            &g.grad_params["weight"],
            &mut |w| Ok(dot(&conv2d(&x, &Conv2dLayer::new(w.clone(), layer.bias().cloned(), geo)?)?, &r)),
            layer.weight(),
        )?);
        out.push(op_check(
            &format!("{name}/bias"),
            &g.grad_params["bias"],
            &mut |b| Ok(dot(&conv2d(&x, &Conv2dLayer::new(layer.weight().clone(), Some(b.clone()), geo)?)?, &r)),
            layer.bias().expect("biased"),
        )?);
    }

    let mut bn = BatchNorm2d::<f64>::new(4)?;
    bn.mode = NormMode::Train;
    bn.gamma = Tensor::randn(&[4], &mut rng, 1.0, 0.3)?;
    bn.beta = Tensor::randn(&[4], &mut rng, 0.0, 0.3)?;
    let x = Tensor::randn(&[2, 4, 8, 8], &mut rng, 0.5, 2.0)?;
    let r = Tensor::randn(x.shape(), &mut rng, 0.0, 1.0)?;
    let g = batchnorm_backward(&x, &bn, &r)?;
    let bn_loss = |bn: &BatchNorm2d<f64>, xi: &Tensor<f64>| -> Result<f64> {
        Ok(dot(&batchnorm_forward(xi, &mut bn.clone())?, &r))
    };
    out.push(op_check("batchnorm/input", &g.grad_input, &mut |xi| bn_loss(&bn, xi), &x)?);
    out.push(op_check(
        "batchnorm/gamma",
        &g.grad_params["gamma"],
        &mut |t| {
            let mut b = bn.clone();
            b.gamma = t.clone();
            bn_loss(&b, &x)
        },
        &bn.gamma,
    )?);
    out.push(op_check(
        "batchnorm/beta",
        &g.grad_params["beta"],
        &mut |t| {
            let mut b = bn.clone();
            b.beta = t.clone();
            bn_loss(&b, &x)
        },
        &bn.beta,
    )?);

    let x = Tensor::randn(&[2, 4, 8, 8], &mut rng, 0.0, 2.0)?;
    let r = Tensor::randn(x.shape(), &mut rng, 0.0, 1.0)?;
    out.push(op_check("gelu/input", &gelu_backward(&x, &r)?, &mut |xi| Ok(dot(&gelu(xi), &r)), &x)?);

    let r = Tensor::randn(&[2, 4], &mut rng, 0.0, 1.0)?;
    out.push(op_check(
        "avgpool/input",
        &global_avg_pool_backward(&r, x.shape())?,
        &mut |xi| Ok(dot(&global_avg_pool(xi)?, &r)),
        &x,
    )?);

    let mut lin = LinearLayer::<f64>::init(4, 3, &mut rng)?;
    lin.bias = Tensor::randn(&[3], &mut rng, 0.0, 0.1)?;
    let v = Tensor::randn(&[2, 4], &mut rng, 0.0, 1.0)?;
    let r = Tensor::randn(&[2, 3], &mut rng, 0.0, 1.0)?;
    let g = linear_backward(&v, &lin, &r)?;
    out.push(op_check("linear/input", &g.grad_input, &mut |vi| Ok(dot(&linear(vi, &lin)?, &r)), &v)?);
    out.push(op_check(
        "linear/weight",
        &g.grad_params["weight"],
        &mut |w| Ok(dot(&linear(&v, &LinearLayer::new(w.clone(), lin.bias.clone())?)?, &r)),
        &lin.weight,
    )?);
    out.push(op_check(
        "linear/bias",
        &g.grad_params["bias"],
        &mut |b| Ok(dot(&linear(&v, &LinearLayer::new(lin.weight.clone(), b.clone())?)?, &r)),
        &lin.bias,
    )?);

    let logits = Tensor::randn(&[2, 5], &mut rng, 0.0, 2.0)?;
    let labels = [1, 4];
    let (_, g) = softmax_cross_entropy(&logits, &labels)?;
    out.push(op_check(
        "cross_entropy/logits",
        &g,
        &mut |l| Ok(softmax_cross_entropy(l, &labels)?.0),
        &logits,
    )?);
    Ok(out)
}

/// Gradient checks of every composite block on `[2, 4, 8, 8]` inputs (the
/// stem takes `[2, 3, 8, 8]`).
pub fn block_gradient_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = Rng::new(seed);
    let x = Tensor::randn(&[2, 4, 8, 8], &mut rng, 0.0, 1.0)?;
    let mut out = Vec::new();

    let mut stem = StemBlock::<f64>::new(3, 4, &mut rng)?;
    jitter_params(&mut stem, &mut rng);
    let xs = Tensor::randn(&[2, 3, 8, 8], &mut rng, 0.0, 1.0)?;
    out.extend(check_block("stem", &stem, &xs, seed)?);

    let mut irb = InvertedResidualBlock::<f64>::new(4, &mut rng)?;
    jitter_params(&mut irb, &mut rng);
    out.extend(check_block("irb", &irb, &x, seed)?);

    let mut down = DownsampleBlock::<f64>::new(4, 6, &mut rng)?;
    jitter_params(&mut down, &mut rng);
    out.extend(check_block("downsample", &down, &x, seed)?);

    let mut mldc = MldcBlock::<f64>::new(4, &MixerSpec::default(), &mut rng)?;
    jitter_params(&mut mldc, &mut rng);
    out.extend(check_block("mldc", &mldc, &x, seed)?);

    let per_branch = MixerSpec {
        gelu_per_branch: true,
        ..Default::default()
    };
    let mut mldc = MldcBlock::<f64>::new(4, &per_branch, &mut rng)?;
    jitter_params(&mut mldc, &mut rng);
    out.extend(check_block("mldc_gelu_per_branch", &mldc, &x, seed)?);

    let mut ffn = LkFfnBlock::<f64>::new(4, true, &mut rng)?;
    jitter_params(&mut ffn, &mut rng);
    out.extend(check_block("lkffn", &ffn, &x, seed)?);

    let mut dcb = DilatedConvBlock::<f64>::new(4, &MixerSpec::default(), true, &mut rng)?;
    jitter_params(&mut dcb, &mut rng);
    out.extend(check_block("dcb", &dcb, &x, seed)?);

    out.extend(head_check(seed)?);
    Ok(out)
}

fn head_check(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = Rng::new(seed ^ 0x4ead);
    let mut head = HeadBlock::<f64>::new(4, Some(6), 3, &mut rng)?;
    jitter_params(&mut head, &mut rng);
    let x = Tensor::randn(&[2, 4, 4, 4], &mut rng, 0.0, 1.0)?;
    let r = Tensor::randn(&[2, 3], &mut rng, 0.0, 1.0)?;
    let (_, cache) = head.forward_train(&x)?;
    let mut grads = NamedTensors::new();
    let gx = head.backward(&cache, &r, "", &mut grads)?;
    let mut out = vec![op_check("head/input", &gx, &mut |xi| Ok(dot(&head.forward(xi)?, &r)), &x)?];
    let mut learnables = Vec::new();
    head.visit_params("", &mut |n, t, _| learnables.push((n.to_string(), t.clone())));
    for (name, value) in learnables {
        let analytic = grads.require(&name)?.clone();
        out.push(op_check(
            &format!("head/{name}"),
            &analytic,
            &mut |t| {
                let mut h = head.clone();
                h.visit_params_mut("", &mut |n, p, _| {
                    if n == name {
                        *p = t.clone();
                    }
                });
                Ok(dot(&h.forward(&x)?, &r))
            },
            &value,
        )?);
    }
    Ok(out)
}

/// Optimized vs naive convolution over `count` random configurations. The
/// kernel/dilation/stride/grouping grid (`k` in 1,3,5,7, `d` in 1,2,3, `s` in
/// 1,2, dense or depthwise) is cycled so every combination is covered once
/// `count >= 48`; channels, padding and extents are random.
pub fn conv_oracle_checks(count: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut grid = Vec::new();
    for k in [1, 3, 5, 7] {
        for d in [1, 2, 3] {
            for s in [1, 2] {
                for depthwise in [false, true] {
                    grid.push((k, d, s, depthwise));
                }
            }
        }
    }
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (k, d, s, depthwise) = grid[i % grid.len()];
        let c = 1 + rng.below(6);
        let (groups, cout) = if depthwise { (c, c) } else { (1, 1 + rng.below(5)) };
        let p = rng.below(d * (k - 1) / 2 + 2);
        let k_eff = (k - 1) * d + 1;
        let min = k_eff.saturating_sub(2 * p).max(1);
        let h = min + rng.below(8);
        let w = min + rng.below(8);
        let geo = ConvGeometry { stride: s, padding: p, dilation: d, groups };
        let layer = Conv2dLayer::<f64>::he_init(c, cout, k, geo, rng.below(2) == 1, &mut rng)?;
        let x = Tensor::randn(&[1 + rng.below(2), c, h, w], &mut rng, 0.0, 1.0)?;
        let fast = conv2d(&x, &layer)?;
        let slow = conv2d_naive(&x, &layer)?;
        out.push(CheckOutcome::new(
            format!("oracle/{i}_k{k}_d{d}_s{s}_p{p}_g{groups}_{c}x{h}x{w}"),
            relative_error(fast.data(), slow.data()),
            ORACLE_TOLERANCE,
        ));
    }
    Ok(out)
}

/// Max-abs logit gap between `model` and its reparameterized copy on a
/// seeded `[1, 3, res, res]` input.
pub fn reparam_check<T: Scalar>(model: &RapidNetModel<T>, resolution: usize, seed: u64, tolerance: f64) -> Result<CheckOutcome> {
    let (fused, _) = reparameterize_model(model)?;
    fused_gap(model, &fused, resolution, seed, tolerance)
}

/// Same as [`reparam_check`] for an already-fused `fused`.
pub fn fused_gap<T: Scalar>(
    model: &RapidNetModel<T>,
    fused: &RapidNetModel<T>,
    resolution: usize,
    seed: u64,
    tolerance: f64,
) -> Result<CheckOutcome> {
    let x = Tensor::randn(&[1, 3, resolution, resolution], &mut Rng::new(seed), 0.0, 1.0)?;
    let diff = model.forward(&x)?.max_abs_diff(&fused.forward(&x)?)?;
    Ok(CheckOutcome::new(
        format!("reparam/{}@{resolution}/{}", model.config.name, T::DTYPE),
        diff.to_f64().unwrap_or(f64::NAN),
        tolerance,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn numeric_gradient_of_square() {
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = numeric_gradient(&mut |t| Ok(t.data().iter().map(|v| v * v).sum()), &x, FD_STEP).unwrap();
        assert!(relative_error(g.data(), &[2.0, -4.0, 1.0]) < 1e-9);
    }
}
