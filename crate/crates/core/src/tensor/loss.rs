use super::Tensor;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Numerically stable softmax of one logit vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Row-wise softmax of an `N x C` tensor.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, _) = logits.dims2("softmax")?;
    let data = (0..n).flat_map(|i| softmax(logits.row(i))).collect();
    Tensor::new(logits.shape(), data)
}

/// Batch-averaged loss and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct CrossEntropy<T> {
    pub loss: T,
    pub grad: Vec<T>,
}

/// `-(1/|C|) sum_c y_c log softmax(z)_c`, averaged over the batch.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<CrossEntropy<T>> {
    let (n, c) = logits.dims2("softmax_cross_entropy")?;
    if labels.shape() != logits.shape() {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!("logits {:?} vs labels {:?}", logits.shape(), labels.shape()),
        ));
    }
    if c < 2 {
        return Err(shape_err("softmax_cross_entropy", "need at least two classes"));
    }
    let scale = T::one() / T::from_usize(n * c).unwrap();
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); n * c];
    for i in 0..n {
        let z = logits.row(i);
        let y = labels.row(i);
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let ysum: T = y.iter().copied().sum();
        for j in 0..c {
            let log_p = z[j] - lse;
            loss -= y[j] * log_p;
            grad[i * c + j] = (log_p.exp() * ysum - y[j]) * scale;
        }
    }
    Ok(CrossEntropy {
        loss: loss * scale,
        grad,
    })
}

/// One-hot `N x C` label matrix.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] = T::one();
    }
    t
}
