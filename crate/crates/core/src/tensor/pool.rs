//! 3x3 max pooling, stride 2, padding 1. Padded cells never win.

use super::Tensor;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// `floor((extent + 2 - 3) / 2) + 1`
pub fn pooled_extent(extent: usize) -> usize {
    (extent + 2 - 3) / 2 + 1
}

pub fn maxpool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = input.dims4("maxpool")?;
    if dims.2 == 0 || dims.3 == 0 {
        return Err(shape_err("maxpool", "empty spatial extent"));
    }
    let (out, _) = maxpool_forward(input.data(), dims);
    Tensor::new(
        &[dims.0, dims.1, pooled_extent(dims.2), pooled_extent(dims.3)],
        out,
    )
}

/// Returns the pooled values and, for each output cell, the flat index of
/// the input cell that produced it (first maximum in scan order).
pub fn maxpool_forward<T: Scalar>(
    input: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (pooled_extent(h), pooled_extent(w));
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        let x = &input[base..base + h * w];
        for oy in 0..oh {
            let y0 = (2 * oy).saturating_sub(1);
            let y1 = (2 * oy + 2).min(h);
            for ox in 0..ow {
                let x0 = (2 * ox).saturating_sub(1);
                let x1 = (2 * ox + 2).min(w);
                let mut best = T::neg_infinity();
                let mut best_idx = y0 * w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let v = x[iy * w + ix];
                        if v > best {
                            best = v;
                            best_idx = iy * w + ix;
                        }
                    }
                }
                out.push(best);
                arg.push((base + best_idx) as u32);
            }
        }
    }
    (out, arg)
}

/// Scatters output gradients back to the winning input cells.
pub fn maxpool_backward<T: Scalar>(grad_out: &[T], argmax: &[u32], input_len: usize) -> Vec<T> {
    let mut grad_in = vec![T::zero(); input_len];
    for (&g, &i) in grad_out.iter().zip(argmax) {
        grad_in[i as usize] += g;
    }
    grad_in
}
