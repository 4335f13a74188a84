//! Dense layer over the channel axis: `N x In x S -> N x Out x S`.
//!
//! With `S = 1` this is an ordinary fully connected layer; with `S > 1` it is
//! a 1x1 convolution (channel mixing at every spatial position).

use super::{BinaryWeights, Tensor};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Weights of a fully connected layer, `D x K`.
pub enum FcWeights<'a, T> {
    Binary(&'a BinaryWeights<T>),
    /// Float exit-head weights.
    Float(&'a Tensor<T>),
}

/// `N x D` times `D x K`.
pub fn fully_connected<T: Scalar>(input: &Tensor<T>, weights: FcWeights<'_, T>) -> Result<Tensor<T>> {
    let (n, d) = input.dims2("fully_connected")?;
    let (wshape, values) = match weights {
        FcWeights::Binary(w) => (w.shape().to_vec(), w.signs()),
        FcWeights::Float(w) => (w.shape().to_vec(), w.data().to_vec()),
    };
    let k = match wshape[..] {
        [wd, k] if wd == d => k,
        _ => {
            return Err(shape_err(
                "fully_connected",
                format!("input has {} features, weights are {:?}", d, wshape),
            ))
        }
    };
    Tensor::new(&[n, k], linear_forward(input.data(), (n, d, 1), &values, k, None))
}

pub fn linear_forward<T: Scalar>(
    x: &[T],
    (n, d, s): (usize, usize, usize),
    w: &[T],
    k: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * k * s];
    for ni in 0..n {
        let o = &mut out[ni * k * s..][..k * s];
        if let Some(b) = bias {
            for (ki, &bv) in b.iter().enumerate() {
                o[ki * s..(ki + 1) * s].iter_mut().for_each(|v| *v = bv);
            }
        }
        let xi = &x[ni * d * s..][..d * s];
        if s == 1 {
            for (di, &xv) in xi.iter().enumerate() {
                for (ov, &wv) in o.iter_mut().zip(&w[di * k..(di + 1) * k]) {
                    *ov += xv * wv;
                }
            }
        } else {
            for di in 0..d {
                let xrow = &xi[di * s..(di + 1) * s];
                for ki in 0..k {
                    let wv = w[di * k + ki];
                    for (ov, &xv) in o[ki * s..(ki + 1) * s].iter_mut().zip(xrow) {
                        *ov += wv * xv;
                    }
                }
            }
        }
    }
    out
}

pub fn linear_backward_input<T: Scalar>(
    grad_out: &[T],
    (n, d, s): (usize, usize, usize),
    w: &[T],
    k: usize,
) -> Vec<T> {
    let mut grad_in = vec![T::zero(); n * d * s];
    for ni in 0..n {
        let g = &grad_out[ni * k * s..][..k * s];
        let gi = &mut grad_in[ni * d * s..][..d * s];
        if s == 1 {
            for (di, v) in gi.iter_mut().enumerate() {
                *v = g.iter().zip(&w[di * k..(di + 1) * k]).map(|(&a, &b)| a * b).sum();
            }
        } else {
            for di in 0..d {
                let row = &mut gi[di * s..(di + 1) * s];
                for ki in 0..k {
                    let wv = w[di * k + ki];
                    for (rv, &gv) in row.iter_mut().zip(&g[ki * s..(ki + 1) * s]) {
                        *rv += wv * gv;
                    }
                }
            }
        }
    }
    grad_in
}

/// Returns `(grad_weights D x K, grad_bias K)`.
pub fn linear_backward_params<T: Scalar>(
    grad_out: &[T],
    x: &[T],
    (n, d, s): (usize, usize, usize),
    k: usize,
) -> (Vec<T>, Vec<T>) {
    let mut gw = vec![T::zero(); d * k];
    let mut gb = vec![T::zero(); k];
    for ni in 0..n {
        let g = &grad_out[ni * k * s..][..k * s];
        let xi = &x[ni * d * s..][..d * s];
        for ki in 0..k {
            gb[ki] += g[ki * s..(ki + 1) * s].iter().copied().sum::<T>();
        }
        if s == 1 {
            for (di, &xv) in xi.iter().enumerate() {
                for (gwv, &gv) in gw[di * k..(di + 1) * k].iter_mut().zip(g) {
                    *gwv += xv * gv;
                }
            }
        } else {
            for di in 0..d {
                let xrow = &xi[di * s..(di + 1) * s];
                for ki in 0..k {
                    let grow = &g[ki * s..(ki + 1) * s];
                    gw[di * k + ki] += xrow.iter().zip(grow).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
        }
    }
    (gw, gb)
}
