use super::{LayerError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    /// Mean cross-entropy over the batch.
    pub loss: T,
    /// Row-wise softmax of the logits, `(N, K)`.
    pub probs: Tensor<T>,
    /// Gradient of `loss` w.r.t. the logits.
    pub grad: Tensor<T>,
}

/// Softmax cross-entropy on `(N, K)` logits with integer labels.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<LossOutput<T>> {
    if logits.ndim() != 2 {
        return Err(LayerError::Rank {
            expected: 2,
            actual: logits.ndim(),
        });
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(LayerError::Shape {
            expected: vec![n],
            actual: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(LayerError::Label { label, classes: k });
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        total += sum.ln() - (row[label] - max);
        probs.extend(exps.iter().map(|&e| e / sum));
    }
    let scale = T::one() / T::of(n.max(1) as f64);
    let mut grad = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        grad[i * k + label] -= T::one();
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(LossOutput {
        loss: total * scale,
        probs: Tensor::new(vec![n, k], probs)?,
        grad: Tensor::new(vec![n, k], grad)?,
    })
}
