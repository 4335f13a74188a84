use super::Tensor;
use crate::scalar::{sign, Scalar};

/// Elementwise sign, `sign(0) = +1`.
pub fn binarize<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| sign(v)).collect();
    Tensor::new(input.shape(), data).expect("shape preserved")
}

/// Straight-through estimator: pass the upstream gradient where |x| <= 1.
pub fn binarize_backward<T: Scalar>(grad_out: &[T], pre_activation: &[T]) -> Vec<T> {
    grad_out
        .iter()
        .zip(pre_activation)
        .map(|(&g, &x)| if x.abs() <= T::one() { g } else { T::zero() })
        .collect()
}
