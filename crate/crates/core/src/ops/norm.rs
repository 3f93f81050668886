use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::GradResult;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates only.
    Eval,
}

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: NormMode,
}

struct BatchStats {
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

impl<T: Scalar> BatchNorm2d<T> {
    /// `gamma = 1`, `beta = 0`, running mean 0 and variance 1, eval mode.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: Tensor::new(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::new(&[channels], T::one())?,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            mode: NormMode::Eval,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels() {
            return Err(Error::shape(format!(
                "batch norm over {} channels got {c}",
                self.channels()
            )));
        }
        Ok((n, c, h * w))
    }

    fn batch_stats(&self, x: &Tensor<T>) -> Result<BatchStats> {
        let (n, c, plane) = self.check(x)?;
        let count = n * plane;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let xd = x.data();
        for ch in 0..c {
            let planes = || (0..n).flat_map(move |b| xd[(b * c + ch) * plane..][..plane].iter());
            let m = planes().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>() / count as f64;
            let v = planes()
                .map(|v| (v.to_f64().unwrap_or(f64::NAN) - m).powi(2))
                .sum::<f64>()
                / count as f64;
            mean[ch] = m;
            var[ch] = v;
        }
        Ok(BatchStats { mean, var, count })
    }

    /// Applies `(x - mean) * scale + shift` per channel.
    fn affine(&self, x: &Tensor<T>, mean: &[f64], var: &[f64]) -> Result<Tensor<T>> {
        let (_, c, plane) = self.check(x)?;
        let scale: Vec<T> = (0..c)
            .map(|ch| self.gamma.data()[ch] / T::lit(var[ch] + self.eps).sqrt())
            .collect();
        let means: Vec<T> = mean.iter().map(|&m| T::lit(m)).collect();
        let mut out = x.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let ch = i % c;
            let (s, m, b) = (scale[ch], means[ch], self.beta.data()[ch]);
            for v in chunk {
                *v = (*v - m) * s + b;
            }
        }
        Ok(out)
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = |t: &Tensor<T>| -> Vec<f64> {
            t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
        };
        self.affine(x, &f(&self.running_mean), &f(&self.running_var))
    }

    /// Normalizes with batch statistics and folds them into the running
    /// estimates (unbiased variance, as in the usual convention).
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let stats = self.batch_stats(x)?;
        let out = self.affine(x, &stats.mean, &stats.var)?;
        let m = self.momentum;
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for ch in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = T::lit((1.0 - m) * rm.to_f64().unwrap_or(0.0) + m * stats.mean[ch]);
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = T::lit((1.0 - m) * rv.to_f64().unwrap_or(1.0) + m * stats.var[ch] * unbias);
        }
        Ok(out)
    }
}

/// Dispatches on `bn.mode`; train mode updates the running statistics.
pub fn batchnorm_forward<T: Scalar>(x: &Tensor<T>, bn: &mut BatchNorm2d<T>) -> Result<Tensor<T>> {
    match bn.mode {
        NormMode::Train => bn.forward_train(x),
        NormMode::Eval => bn.forward_eval(x),
    }
}

/// Gradient of a train-mode batch norm, recomputing the batch statistics of
/// `x`. Eval-mode BN is a fixed affine map and is folded instead.
pub fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    bn: &BatchNorm2d<T>,
    grad_out: &Tensor<T>,
) -> Result<GradResult<T>> {
    if bn.mode != NormMode::Train {
        return Err(Error::InvalidState(
            "batchnorm_backward requires a train-mode layer".into(),
        ));
    }
    if x.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "grad_out {:?} vs input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let stats = bn.batch_stats(x)?;
    let (n, c, plane) = bn.check(x)?;
    let m = stats.count as f64;
    let xd = x.data();
    let gd = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); x.numel()];
    for ch in 0..c {
        let inv_std = 1.0 / (stats.var[ch] + bn.eps).sqrt();
        let mean = stats.mean[ch];
        let idx = move |b: usize| (b * c + ch) * plane;
        let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
        for b in 0..n {
            for i in 0..plane {
                let g = gd[idx(b) + i].to_f64().unwrap_or(f64::NAN);
                let xhat = (xd[idx(b) + i].to_f64().unwrap_or(f64::NAN) - mean) * inv_std;
                sum_g += g;
                sum_gx += g * xhat;
            }
        }
        dgamma[ch] = T::lit(sum_gx);
        dbeta[ch] = T::lit(sum_g);
        let gamma = bn.gamma.data()[ch].to_f64().unwrap_or(f64::NAN);
        let k = gamma * inv_std / m;
        for b in 0..n {
            for i in 0..plane {
                let j = idx(b) + i;
                let g = gd[j].to_f64().unwrap_or(f64::NAN);
                let xhat = (xd[j].to_f64().unwrap_or(f64::NAN) - mean) * inv_std;
                dx[j] = T::lit(k * (m * g - sum_g - xhat * sum_gx));
            }
        }
    }
    let mut grad_params = BTreeMap::new();
    grad_params.insert("gamma".to_string(), Tensor::from_vec(&[c], dgamma)?);
    grad_params.insert("beta".to_string(), Tensor::from_vec(&[c], dbeta)?);
    Ok(GradResult {
        grad_input: Tensor::from_vec(x.shape(), dx)?,
        grad_params,
    })
}
