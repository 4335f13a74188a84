//! 3x3 convolution, stride 1, zero padding 1. Output spatial size equals the
//! input spatial size.

use super::{BinaryWeights, Tensor};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

type Dims = (usize, usize, usize, usize);

/// Range of output coordinates whose input tap `o + k - 1` is in bounds.
#[inline]
fn valid_range(k: usize, extent: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { extent.saturating_sub(1) } else { extent };
    (lo, hi)
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, weights: &BinaryWeights<T>) -> Result<Tensor<T>> {
    let dims = input.dims4("conv2d")?;
    let filters = check_weights(dims, weights.shape())?;
    let out = conv3x3_forward(input.data(), dims, &weights.signs(), filters);
    Tensor::new(&[dims.0, filters, dims.2, dims.3], out)
}

pub(crate) fn check_weights(dims: Dims, wshape: &[usize]) -> Result<usize> {
    let (_, c, h, w) = dims;
    if h == 0 || w == 0 {
        return Err(shape_err("conv2d", format!("empty spatial extent {}x{}", h, w)));
    }
    match *wshape {
        [f, wc, 3, 3] if wc == c => Ok(f),
        _ => Err(shape_err(
            "conv2d",
            format!("weights {:?} incompatible with {} input channels (want Fx{}x3x3)", wshape, c, c),
        )),
    }
}

/// `weights` is `F x C x 3 x 3`; returns `N x F x H x W`.
pub fn conv3x3_forward<T: Scalar>(input: &[T], dims: Dims, weights: &[T], filters: usize) -> Vec<T> {
    let (n, c, h, w) = dims;
    let hw = h * w;
    let mut out = vec![T::zero(); n * filters * hw];
    for ni in 0..n {
        for fi in 0..filters {
            let o = &mut out[(ni * filters + fi) * hw..][..hw];
            for ci in 0..c {
                let x = &input[(ni * c + ci) * hw..][..hw];
                let kernel = &weights[(fi * c + ci) * 9..][..9];
                for ky in 0..3 {
                    let (y0, y1) = valid_range(ky, h);
                    for kx in 0..3 {
                        let (x0, x1) = valid_range(kx, w);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = kernel[ky * 3 + kx];
                        for oy in y0..y1 {
                            let iy = oy + ky - 1;
                            let orow = &mut o[oy * w + x0..oy * w + x1];
                            let irow = &x[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                            for (ov, &iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient with respect to the input.
pub fn conv3x3_backward_input<T: Scalar>(
    grad_out: &[T],
    dims: Dims,
    weights: &[T],
    filters: usize,
) -> Vec<T> {
    let (n, c, h, w) = dims;
    let hw = h * w;
    let mut grad_in = vec![T::zero(); n * c * hw];
    for ni in 0..n {
        for fi in 0..filters {
            let g = &grad_out[(ni * filters + fi) * hw..][..hw];
            for ci in 0..c {
                let gi = &mut grad_in[(ni * c + ci) * hw..][..hw];
                let kernel = &weights[(fi * c + ci) * 9..][..9];
                for ky in 0..3 {
                    let (y0, y1) = valid_range(ky, h);
                    for kx in 0..3 {
                        let (x0, x1) = valid_range(kx, w);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = kernel[ky * 3 + kx];
                        for oy in y0..y1 {
                            let iy = oy + ky - 1;
                            let grow = &g[oy * w + x0..oy * w + x1];
                            let irow = &mut gi[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                            for (iv, &gv) in irow.iter_mut().zip(grow) {
                                *iv += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Gradient with respect to the (binarized) weights, `F x C x 3 x 3`.
pub fn conv3x3_backward_weights<T: Scalar>(
    grad_out: &[T],
    input: &[T],
    dims: Dims,
    filters: usize,
) -> Vec<T> {
    let (n, c, h, w) = dims;
    let hw = h * w;
    let mut grad_w = vec![T::zero(); filters * c * 9];
    for ni in 0..n {
        for fi in 0..filters {
            let g = &grad_out[(ni * filters + fi) * hw..][..hw];
            for ci in 0..c {
                let x = &input[(ni * c + ci) * hw..][..hw];
                let gk = &mut grad_w[(fi * c + ci) * 9..][..9];
                for ky in 0..3 {
                    let (y0, y1) = valid_range(ky, h);
                    for kx in 0..3 {
                        let (x0, x1) = valid_range(kx, w);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = oy + ky - 1;
                            let grow = &g[oy * w + x0..oy * w + x1];
                            let irow = &x[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                            for (&gv, &iv) in grow.iter().zip(irow) {
                                acc += gv * iv;
                            }
                        }
                        gk[ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
    grad_w
}
