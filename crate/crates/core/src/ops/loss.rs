use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - one_hot) / N` with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, classes) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidLabel { label, classes });
    }
    let inv_n = T::lit(1.0 / n as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(n * classes);
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum_exp: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss = loss + (log_z - row[label]) * inv_n;
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let target = if j == label { T::one() } else { T::zero() };
            grad.push((p - target) * inv_n);
        }
    }
    Ok((loss, Tensor::from_vec(&[n, classes], grad)?))
}
