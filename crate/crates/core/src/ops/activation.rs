use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GeLU `x * Phi(x)` with `Phi` the standard normal CDF (erf form).
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = T::lit(FRAC_1_SQRT_2PI) * (-(x * x) * T::lit(0.5)).exp();
    cdf + x * pdf
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// `grad_out * (Phi(x) + x * phi(x))`.
pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "gelu grad {:?} vs input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| g * gelu_grad_scalar(v))
        .collect();
    Tensor::from_vec(x.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert_eq!(gelu_grad_scalar(0.0f64), 0.5);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
        assert!((gelu_scalar(10.0f32) - 10.0).abs() < 1e-6);
        assert!(gelu_scalar(-10.0f64).abs() < 1e-6);
    }

    /// erf by its Maclaurin series, summed until terms vanish.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        while term.abs() > 1e-20 {
            n += 1.0;
            term *= -x * x / n;
            sum += term / (2.0 * n + 1.0);
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn matches_series_erf_oracle() {
        for &x in &[1.0f64, -0.7, 0.3, 2.2] {
            let phi = 0.5 * (1.0 + erf_series(x / std::f64::consts::SQRT_2));
            assert!((gelu_scalar(x) - x * phi).abs() < 1e-14, "x = {x}");
        }
    }

    #[test]
    fn shape_mismatch() {
        let x = Tensor::<f32>::zeros(&[2, 2]).unwrap();
        let g = Tensor::<f32>::zeros(&[4]).unwrap();
        assert!(gelu_backward(&x, &g).is_err());
    }
}
