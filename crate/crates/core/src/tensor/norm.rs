//! Batch normalization over axis 1 of an `N x C x ...` tensor.

use super::{Mode, Tensor};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnConfig {
    pub epsilon: f64,
    /// Weight kept by the running statistics on each update.
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    dims: (usize, usize, usize),
}

/// `(n, c, inner)` for an `N x C x ...` shape.
fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err("batch_norm", format!("need N x C x ..., got {:?}", shape)));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: &mut RunningStats<T>,
    config: BnConfig,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
    let (_, c, _) = layout(input.shape())?;
    if gamma.len() != c || beta.len() != c || stats.mean.len() != c {
        return Err(shape_err(
            "batch_norm",
            format!(
                "{} channels but gamma/beta/stats have {}/{}/{}",
                c,
                gamma.len(),
                beta.len(),
                stats.mean.len()
            ),
        ));
    }
    match mode {
        Mode::Train => {
            let (out, cache) = train_forward(input.data(), input.shape(), gamma, beta, stats, config);
            Ok((Tensor::new(input.shape(), out)?, Some(cache)))
        }
        Mode::Infer => {
            let out = infer_forward(input.data(), input.shape(), gamma, beta, stats, config);
            Ok((Tensor::new(input.shape(), out)?, None))
        }
    }
}

pub(crate) fn train_forward<T: Scalar>(
    x: &[T],
    shape: &[usize],
    gamma: &[T],
    beta: &[T],
    stats: &mut RunningStats<T>,
    config: BnConfig,
) -> (Vec<T>, BnCache<T>) {
    let (n, c, s) = layout(shape).expect("validated by caller");
    let m = n * s;
    let mf = T::from_usize(m).unwrap();
    let eps = T::of(config.epsilon);
    let keep = T::of(config.momentum);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    for ci in 0..c {
        let mut mean = T::zero();
        for ni in 0..n {
            mean += x[(ni * c + ci) * s..][..s].iter().copied().sum::<T>();
        }
        mean /= mf;
        let mut var = T::zero();
        for ni in 0..n {
            for &v in &x[(ni * c + ci) * s..][..s] {
                let d = v - mean;
                var += d * d;
            }
        }
        let unbiased = if m > 1 {
            var / T::from_usize(m - 1).unwrap()
        } else {
            var
        };
        var /= mf;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[ci] = istd;
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for k in base..base + s {
                let h = (x[k] - mean) * istd;
                xhat[k] = h;
                out[k] = gamma[ci] * h + beta[ci];
            }
        }
        stats.mean[ci] = keep * stats.mean[ci] + (T::one() - keep) * mean;
        stats.var[ci] = keep * stats.var[ci] + (T::one() - keep) * unbiased;
    }
    (
        out,
        BnCache {
            xhat,
            inv_std,
            dims: (n, c, s),
        },
    )
}

pub(crate) fn infer_forward<T: Scalar>(
    x: &[T],
    shape: &[usize],
    gamma: &[T],
    beta: &[T],
    stats: &RunningStats<T>,
    config: BnConfig,
) -> Vec<T> {
    let (n, c, s) = layout(shape).expect("validated by caller");
    let eps = T::of(config.epsilon);
    let mut out = vec![T::zero(); x.len()];
    for ci in 0..c {
        let scale = gamma[ci] / (stats.var[ci] + eps).sqrt();
        let shift = beta[ci] - scale * stats.mean[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for k in base..base + s {
                out[k] = scale * x[k] + shift;
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batch_norm_backward<T: Scalar>(
    grad_out: &[T],
    cache: &BnCache<T>,
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, s) = cache.dims;
    let mf = T::from_usize(n * s).unwrap();
    let mut grad_in = vec![T::zero(); grad_out.len()];
    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    for ci in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for k in base..base + s {
                sum_dy += grad_out[k];
                sum_dy_xhat += grad_out[k] * cache.xhat[k];
            }
        }
        grad_gamma[ci] = sum_dy_xhat;
        grad_beta[ci] = sum_dy;
        let scale = gamma[ci] * cache.inv_std[ci] / mf;
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for k in base..base + s {
                grad_in[k] = scale * (mf * grad_out[k] - sum_dy - cache.xhat[k] * sum_dy_xhat);
            }
        }
    }
    (grad_in, grad_gamma, grad_beta)
}
