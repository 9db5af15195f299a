use super::Tensor;
use crate::{Error, Result, Scalar};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let z = row.iter().copied().sum::<T>();
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Mean negative log-likelihood over the batch and its gradient `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
    let (b, n) = logits.shape();
    if targets.len() != b {
        return Err(Error::domain(format!("{} targets for a batch of {b}", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::domain(format!("target class {t} out of range for {n} classes")));
    }
    let mut grad = softmax_rows(logits);
    let bt = T::lit(b as f64);
    let mut loss = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += lse - row[t];
        let g = grad.row_mut(r);
        g[t] -= T::one();
        g.iter_mut().for_each(|v| *v /= bt);
    }
    Ok((loss / bt, grad))
}
