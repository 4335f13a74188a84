//! Independent reference implementations and finite-difference checks
//! shared by the kernel tests and the acceptance run.
#![allow(dead_code)]

use ddnn::model::{AggregationKind, Aggregator};
use ddnn::tensor::block::{BatchNorm, Linear};
use ddnn::tensor::{
    binarize_backward, conv2d, conv3x3_backward_input, conv3x3_backward_weights, conv3x3_forward, fully_connected,
    linear_backward_input, linear_backward_params, linear_forward, maxpool, maxpool_backward, maxpool_forward,
    softmax_cross_entropy, BinaryWeights, BnConfig, FcWeights, Mode, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn signs(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- oracles

/// Direct six-loop 3x3 convolution, stride 1, zero padding 1.
pub fn naive_conv(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), wt: &[f64], f: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * f * h * w];
    for ni in 0..n {
        for fi in 0..f {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                    * wt[((fi * c + ci) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out[((ni * f + fi) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

/// 3x3 stride-2 max pool by scanning each window's in-bounds cells.
pub fn naive_maxpool(x: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let oh = (h - 1) / 2 + 1;
    let ow = (w - 1) / 2 + 1;
    let mut out = Vec::new();
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<f64> = None;
                for y in (2 * oy).saturating_sub(1)..(2 * oy + 2).min(h) {
                    for xx in (2 * ox).saturating_sub(1)..(2 * ox + 2).min(w) {
                        let v = x[plane * h * w + y * w + xx];
                        best = Some(best.map_or(v, |b: f64| b.max(v)));
                    }
                }
                out.push(best.expect("window has a real cell"));
            }
        }
    }
    out
}

pub fn naive_matmul(x: &[f64], n: usize, d: usize, wt: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            for t in 0..d {
                out[i * k + j] += x[i * d + t] * wt[t * k + j];
            }
        }
    }
    out
}

/// Runs `instances` random cases of each kernel against its oracle and
/// returns `(conv, maxpool, fully_connected)` worst absolute differences.
pub fn kernel_oracle_max_diffs(instances: usize, seed: u64) -> (f64, f64, f64) {
    let mut r = rng(seed);
    let (mut conv, mut pool, mut fc) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..instances {
        let dims = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..9), r.gen_range(1..9));
        let f = r.gen_range(1..5);
        let x = uniform(&mut r, dims.0 * dims.1 * dims.2 * dims.3, -2.0, 2.0);
        let wsigns = signs(&mut r, f * dims.1 * 9);
        let input = Tensor::new(&[dims.0, dims.1, dims.2, dims.3], x.clone()).unwrap();
        let wts = BinaryWeights::from_latent(Tensor::new(&[f, dims.1, 3, 3], wsigns.clone()).unwrap());
        let got = conv2d(&input, &wts).unwrap();
        conv = conv.max(max_abs_diff(got.data(), &naive_conv(&x, dims, &wsigns, f)));

        let got = maxpool(&input).unwrap();
        pool = pool.max(max_abs_diff(got.data(), &naive_maxpool(&x, dims)));

        let (n, d, k) = (r.gen_range(1..5), r.gen_range(1..12), r.gen_range(1..5));
        let x = uniform(&mut r, n * d, -2.0, 2.0);
        let wsigns = signs(&mut r, d * k);
        let input = Tensor::new(&[n, d], x.clone()).unwrap();
        let wts = BinaryWeights::from_latent(Tensor::new(&[d, k], wsigns.clone()).unwrap());
        let got = fully_connected(&input, FcWeights::Binary(&wts)).unwrap();
        fc = fc.max(max_abs_diff(got.data(), &naive_matmul(&x, n, d, &wsigns, k)));
    }
    (conv, pool, fc)
}

// ------------------------------------------------------ gradient checking

pub const FD_STEP: f64 = 1e-6;

/// `||a - b|| / max(||a||, ||b||)`, with an absolute floor for tiny
/// gradients.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-8)
}

/// Central differences of the scalar `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst relative error per checked quantity over `instances` random cases.
#[derive(Debug, Default, Clone)]
pub struct GradReport {
    pub entries: Vec<(&'static str, usize, f64)>,
}

impl GradReport {
    fn record(&mut self, name: &'static str, err: f64) {
        match self.entries.iter_mut().find(|(n, _, _)| *n == name) {
            Some(e) => {
                e.1 += 1;
                e.2 = e.2.max(err);
            }
            None => self.entries.push((name, 1, err)),
        }
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.2).fold(0.0, f64::max)
    }

    pub fn min_instances(&self) -> usize {
        self.entries.iter().map(|e| e.1).min().unwrap_or(0)
    }
}

/// Finite-difference checks of every float-parameterized layer, softmax
/// cross entropy, and the straight-through surrogates of the binary layers.
pub fn gradient_checks(instances: usize, seed: u64) -> GradReport {
    let mut r = rng(seed);
    let mut rep = GradReport::default();
    for _ in 0..instances {
        check_cross_entropy(&mut r, &mut rep);
        check_batch_norm(&mut r, &mut rep);
        check_linear(&mut r, &mut rep);
        check_conv_surrogate(&mut r, &mut rep);
        check_dense_surrogate(&mut r, &mut rep);
        check_maxpool(&mut r, &mut rep);
        check_binarized_batch_norm(&mut r, &mut rep);
        check_aggregation(&mut r, &mut rep);
    }
    rep
}

fn check_cross_entropy(r: &mut ChaCha8Rng, rep: &mut GradReport) {
    let (n, c) = (r.gen_range(1..5), r.gen_range(2..6));
    let z = uniform(r, n * c, -3.0, 3.0);
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
    let y = ddnn::tensor::one_hot::<f64>(&labels, c);
    let loss = |z: &[f64]| softmax_cross_entropy(&Tensor::new(&[n, c], z.to_vec()).unwrap(), &y).unwrap().loss;
    let analytic = softmax_cross_entropy(&Tensor::new(&[n, c], z.clone()).unwrap(), &y).unwrap().grad;
    rep.record("softmax_cross_entropy/logits", rel_err(&analytic, &numeric_grad(&z, loss)));
}

fn check_batch_norm(r: &mut ChaCha8Rng, rep: &mut GradReport) {
    let (n, c, s) = (r.gen_range(2..5), r.gen_range(1..4), r.gen_range(1..5));
    let shape = [n, c, s];
    let x = uniform(r, n * c * s, -2.0, 2.0);
    let g_out = uniform(r, n * c * s, -1.0, 1.0);
    let mut bn = BatchNorm::<f64>::new(c, BnConfig::default());
    bn.gamma.data_mut().copy_from_slice(&uniform(r, c, 0.5, 1.5));
    bn.beta.data_mut().copy_from_slice(&uniform(r, c, -0.5, 0.5));
    let base = bn.clone();
    let objective = |bn: &mut BatchNorm<f64>, x: &[f64]| dot(&bn.forward(x, &shape, Mode::Train).unwrap(), &g_out);

    let mut layer = base.clone();
    layer.forward(&x, &shape, Mode::Train).unwrap();
    let gx = layer.backward(&g_out).unwrap();
    let num = numeric_grad(&x, |x| objective(&mut base.clone(), x));
    rep.record("batch_norm/input", rel_err(&gx, &num));

    let gamma = base.gamma.data().to_vec();
    let num = numeric_grad(&gamma, |g| {
        let mut b = base.clone();
        b.gamma.data_mut().copy_from_slice(g);
        objective(&mut b, &x)
    });
    rep.record("batch_norm/gamma", rel_err(layer.gamma.grad().unwrap(), &num));

    let beta = base.beta.data().to_vec();
    let num = numeric_grad(&beta, |bt| {
        let mut b = base.clone();
        b.beta.data_mut().copy_from_slice(bt);
        objective(&mut b, &x)
    });
    rep.record("batch_norm/beta", rel_err(layer.beta.grad().unwrap(), &num));
}

fn check_linear(r: &mut ChaCha8Rng, rep: &mut GradReport) {
    let (n, d, k, s) = (r.gen_range(1..4), r.gen_range(1..7), r.gen_range(1..5), r.gen_range(1..4));
    let x = uniform(r, n * d * s, -1.0, 1.0);
    let g_out = uniform(r, n * k * s, -1.0, 1.0);
    let mut layer = Linear::<f64>::new(r, d, k);
    layer.bias.data_mut().copy_from_slice(&uniform(r, k, -0.5, 0.5));
    let base = layer.clone();
    let run = |l: &Linear<f64>, x: &[f64]| dot(l.infer(&Tensor::new(&[n, d, s], x.to_vec()).unwrap()).unwrap().data(), &g_out);

    layer.forward(&Tensor::new(&[n, d, s], x.clone()).unwrap(), Mode::Train).unwrap();
    let gx = layer.backward(&g_out, true).unwrap().unwrap();
    rep.record("linear/input", rel_err(&gx, &numeric_grad(&x, |x| run(&base, x))));
    let w = base.weight.data().to_vec();
    let num = numeric_grad(&w, |w| {
        let mut l = base.clone();
        l.weight.data_mut().copy_from_slice(w);
        run(&l, &x)
    });
    rep.record("linear/weight", rel_err(layer.weight.grad().unwrap(), &num));
    let b = base.bias.data().to_vec();
    let num = numeric_grad(&b, |b| {
        let mut l = base.clone();
        l.bias.data_mut().copy_from_slice(b);
        run(&l, &x)
    });
    rep.record("linear/bias", rel_err(layer.bias.grad().unwrap(), &num));
}

/// Binary convolution with the sign replaced by the identity on the shadow
/// weights: the function whose gradient the straight-through update uses.
fn check_conv_surrogate(r: &mut ChaCha8Rng, rep: &mut GradReport) {
    let dims = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..6), r.gen_range(1..6));
    let f = r.gen_range(1..4);
    let x = uniform(r, dims.0 * dims.1 * dims.2 * dims.3, -1.0, 1.0);
    let w = uniform(r, f * dims.1 * 9, -1.0, 1.0);
    let g_out = uniform(r, dims.0 * f * dims.2 * dims.3, -1.0, 1.0);
    let gx = conv3x3_backward_input(&g_out, dims, &w, f);
    let gw = conv3x3_backward_weights(&g_out, &x, dims, f);
    let num = numeric_grad(&x, |x| dot(&conv3x3_forward(x, dims, &w, f), &g_out));
    rep.record("conv/input", rel_err(&gx, &num));
    let num = numeric_grad(&w, |w| dot(&conv3x3_forward(&x, dims, w, f), &g_out));
    rep.record("conv/shadow_weights", rel_err(&gw, &num));
}

fn check_dense_surrogate(r: &mut ChaCha8Rng, rep: &mut GradReport) {
    let (n, d, k) = (r.gen_range(1..4), r.gen_range(1..9), r.gen_range(1..4));
    let x = uniform(r, n * d, -1.0, 1.0);
    let w = uniform(r, d * k, -1.0, 1.0);
    let g_out = uniform(r, n * k, -1.0, 1.0);
    let gx = linear_backward_input(&g_out, (n, d, 1), &w, k);
    let (gw, _) = linear_backward_params(&g_out, &x, (n, d, 1), k);
    let num = numeric_grad(&x, |x| dot(&linear_forward(x, (n, d, 1), &w, k, None), &g_out));
    rep.record("dense/input", rel_err(&gx, &num));
    let num = numeric_grad(&w, |w| dot(&linear_forward(&x, (n, d, 1), w, k, None), &g_out));
    rep.record("dense/shadow_weights", rel_err(&gw, &num));
}

fn check_maxpool(r: &mut ChaCha8Rng, rep: &mut GradReport) {
    let dims = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(2..7), r.gen_range(2..7));
    let len = dims.0 * dims.1 * dims.2 * dims.3;
    // distinct values keep every window's maximum away from a tie
    let mut x: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
    for i in (1..len).rev() {
        x.swap(i, r.gen_range(0..=i));
    }
    let (out, arg) = maxpool_forward(&x, dims);
    let g_out = uniform(r, out.len(), -1.0, 1.0);
    let gx = maxpool_backward(&g_out, &arg, len);
    let num = numeric_grad(&x, |x| dot(&maxpool_forward(x, dims).0, &g_out));
    rep.record("maxpool/input", rel_err(&gx, &num));
}

/// `hardtanh(batch_norm(x))` is the surrogate the straight-through
/// estimator differentiates in place of `sign(batch_norm(x))`.
fn check_binarized_batch_norm(r: &mut ChaCha8Rng, rep: &mut GradReport) {
    let (n, c) = (r.gen_range(3..6), r.gen_range(1..3));
    let shape = [n, c];
    let x = uniform(r, n * c, -2.0, 2.0);
    let g_out = uniform(r, n * c, -1.0, 1.0);
    let mut bn = BatchNorm::<f64>::new(c, BnConfig::default());
    bn.gamma.data_mut().copy_from_slice(&uniform(r, c, 0.3, 1.2));
    let base = bn.clone();
    let pre = bn.forward(&x, &shape, Mode::Train).unwrap();
    let gx = bn.backward(&binarize_backward(&g_out, &pre)).unwrap();
    let num = numeric_grad(&x, |x| {
        let y = base.clone().forward(x, &shape, Mode::Train).unwrap();
        dot(&y.iter().map(|v| v.clamp(-1.0, 1.0)).collect::<Vec<_>>(), &g_out)
    });
    rep.record("binarize_after_batch_norm/input", rel_err(&gx, &num));
}

fn check_aggregation(r: &mut ChaCha8Rng, rep: &mut GradReport) {
    let (devices, rows, c, s) = (r.gen_range(1..4), r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..3));
    let len = rows * c * s;
    let inputs: Vec<Vec<f64>> = (0..devices).map(|_| uniform(r, len, -1.0, 1.0)).collect();
    let g_out = uniform(r, len, -1.0, 1.0);
    let active = vec![true; devices];
    for kind in [AggregationKind::Average, AggregationKind::Concat] {
        let mut agg = Aggregator::<f64>::new(r, kind, devices, c);
        let base = agg.clone();
        let tensors: Vec<Tensor<f64>> = inputs.iter().map(|v| Tensor::new(&[rows, c, s], v.clone()).unwrap()).collect();
        let refs: Vec<&Tensor<f64>> = tensors.iter().collect();
        agg.forward(&refs, &active, Mode::Train).unwrap();
        let grads = agg.backward(&g_out).unwrap();
        let flat: Vec<f64> = inputs.concat();
        let num = numeric_grad(&flat, |flat| {
            let ts: Vec<Tensor<f64>> = flat.chunks(len).map(|v| Tensor::new(&[rows, c, s], v.to_vec()).unwrap()).collect();
            let refs: Vec<&Tensor<f64>> = ts.iter().collect();
            dot(base.infer(&refs, &active).unwrap().data(), &g_out)
        });
        let analytic: Vec<f64> = grads.into_iter().flat_map(|g| g.unwrap()).collect();
        let name = if kind == AggregationKind::Average { "aggregate_ap/inputs" } else { "aggregate_cc/inputs" };
        rep.record(name, rel_err(&analytic, &num));
        if let Some(p) = agg.projection.as_ref() {
            let w = base.projection.as_ref().unwrap().weight.data().to_vec();
            let num = numeric_grad(&w, |w| {
                let mut b = base.clone();
                b.projection.as_mut().unwrap().weight.data_mut().copy_from_slice(w);
                dot(b.infer(&refs, &active).unwrap().data(), &g_out)
            });
            rep.record("aggregate_cc/projection", rel_err(p.weight.grad().unwrap(), &num));
        }
    }
}
