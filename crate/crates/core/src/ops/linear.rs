use std::collections::BTreeMap;

use super::GradResult;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

/// Fully connected layer, `y = x W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer<T> {
    /// `[out_features, in_features]`
    pub weight: Tensor<T>,
    /// `[out_features]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (out_f, _) = weight.dims2()?;
        if bias.shape() != [out_f] {
            return Err(Error::shape(format!(
                "linear bias {:?} for {out_f} outputs",
                bias.shape()
            )));
        }
        Ok(LinearLayer { weight, bias })
    }

    /// Weights from `N(0, 0.02)`, zero bias.
    pub fn init(in_features: usize, out_features: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(
            Tensor::randn(&[out_features, in_features], rng, 0.0, 0.02)?,
            Tensor::zeros(&[out_features])?,
        )
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

fn check<T: Scalar>(x: &Tensor<T>, layer: &LinearLayer<T>) -> Result<(usize, usize, usize)> {
    let (n, f) = x.dims2()?;
    if f != layer.in_features() {
        return Err(Error::shape(format!(
            "linear expects {} input features, got {f}",
            layer.in_features()
        )));
    }
    Ok((n, f, layer.out_features()))
}

pub fn linear<T: Scalar>(x: &Tensor<T>, layer: &LinearLayer<T>) -> Result<Tensor<T>> {
    let (n, fin, fout) = check(x, layer)?;
    let mut out: Vec<T> = (0..n).flat_map(|_| layer.bias.data().iter().copied()).collect();
    T::gemm(n, fin, fout, T::one(), x.data(), false, layer.weight.data(), true, T::one(), &mut out);
    Tensor::from_vec(&[n, fout], out)
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    layer: &LinearLayer<T>,
    grad_out: &Tensor<T>,
) -> Result<GradResult<T>> {
    let (n, fin, fout) = check(x, layer)?;
    if grad_out.shape() != [n, fout] {
        return Err(Error::shape(format!(
            "grad_out {:?}, linear output is [{n}, {fout}]",
            grad_out.shape()
        )));
    }
    let g = grad_out.data();
    let mut dx = vec![T::zero(); n * fin];
    T::gemm(n, fout, fin, T::one(), g, false, layer.weight.data(), false, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); fout * fin];
    T::gemm(fout, n, fin, T::one(), g, true, x.data(), false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); fout];
    for row in g.chunks(fout) {
        for (a, &b) in db.iter_mut().zip(row) {
            *a = *a + b;
        }
    }
    let mut grad_params = BTreeMap::new();
    grad_params.insert("weight".to_string(), Tensor::from_vec(&[fout, fin], dw)?);
    grad_params.insert("bias".to_string(), Tensor::from_vec(&[fout], db)?);
    Ok(GradResult {
        grad_input: Tensor::from_vec(&[n, fin], dx)?,
        grad_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic() {
        let l = LinearLayer::new(
            Tensor::from_vec(&[1, 2], vec![1.0f64, 1.0]).unwrap(),
            Tensor::from_vec(&[1], vec![0.5]).unwrap(),
        )
        .unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(linear(&x, &l).unwrap().data(), &[3.5]);
    }

    #[test]
    fn identity_weight() {
        let mut w = Tensor::zeros(&[3, 3]).unwrap();
        for i in 0..3 {
            w.data_mut()[i * 4] = 1.0f32;
        }
        let l = LinearLayer::new(w, Tensor::zeros(&[3]).unwrap()).unwrap();
        let x = Tensor::randn(&[4, 3], &mut Rng::new(0), 0.0, 1.0).unwrap();
        assert_eq!(linear(&x, &l).unwrap(), x);
    }

    #[test]
    fn mismatch() {
        let l = LinearLayer::<f32>::init(3, 2, &mut Rng::new(0)).unwrap();
        let x = Tensor::zeros(&[1, 4]).unwrap();
        assert!(matches!(linear(&x, &l), Err(Error::ShapeMismatch(_))));
        assert!(LinearLayer::new(Tensor::<f32>::zeros(&[2, 3]).unwrap(), Tensor::zeros(&[3]).unwrap()).is_err());
    }
}
