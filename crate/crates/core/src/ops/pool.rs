use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Spatial mean of an `[N, C, H, W]` map, giving `[N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let inv = T::lit(1.0 / plane as f64);
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let [n, c, h, w] = *input_shape else {
        return Err(Error::shape(format!("pool input shape {input_shape:?} is not 4-D")));
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::shape(format!(
            "pool grad {:?} for input {input_shape:?}",
            grad_out.shape()
        )));
    }
    let plane = h * w;
    let inv = T::lit(1.0 / plane as f64);
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, plane))
        .collect();
    Tensor::from_vec(input_shape, data)
}
