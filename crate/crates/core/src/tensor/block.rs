//! Parameterized layers and the fused binary blocks built from them.
//!
//! A ConvP block is `conv 3x3/s1/p1 -> maxpool 3x3/s2/p1 -> batch norm ->
//! sign`. An FC block is `binary dense -> batch norm -> sign`; the exit-head
//! variant stops before the sign and emits the normalized floats.

use rand::Rng;

use super::conv::check_weights;
use super::norm::{infer_forward, train_forward};
use super::*;
use crate::error::{shape_err, Result};
use crate::scalar::{sign, Scalar};

/// Anything owning trainable tensors.
pub trait Parameterized<T: Scalar> {
    /// Trainable tensors in a fixed, declared order.
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    /// Re-derives packed signs after an optimizer update.
    fn rebinarize(&mut self) {}

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Uniform in `[-s, s]` with `s = sqrt(1 / fan_in)`.
pub fn init_uniform<T: Scalar, R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<T> {
    let s = (1.0 / fan_in as f64).sqrt();
    (0..len).map(|_| T::of(rng.gen_range(-s..=s))).collect()
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
    pub config: BnConfig,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, config: BnConfig) -> Self {
        Self {
            gamma: Tensor::parameter(&[channels], vec![T::one(); channels]).unwrap(),
            beta: Tensor::parameter(&[channels], vec![T::zero(); channels]).unwrap(),
            stats: RunningStats::new(channels),
            config,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape.len() < 2 || shape[1] != self.channels() {
            return Err(shape_err(
                "batch_norm",
                format!("{} channels expected, input {:?}", self.channels(), shape),
            ));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &[T], shape: &[usize], mode: Mode) -> Result<Vec<T>> {
        self.check(shape)?;
        match mode {
            Mode::Train => {
                let (out, cache) = train_forward(
                    x,
                    shape,
                    self.gamma.data(),
                    self.beta.data(),
                    &mut self.stats,
                    self.config,
                );
                self.cache = Some(cache);
                Ok(out)
            }
            Mode::Infer => self.infer(x, shape),
        }
    }

    pub fn infer(&self, x: &[T], shape: &[usize]) -> Result<Vec<T>> {
        self.check(shape)?;
        Ok(infer_forward(
            x,
            shape,
            self.gamma.data(),
            self.beta.data(),
            &self.stats,
            self.config,
        ))
    }

    pub fn backward(&mut self, grad_out: &[T]) -> Result<Vec<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| shape_err("batch_norm", "backward without a training forward"))?;
        let (gi, gg, gb) = batch_norm_backward(grad_out, &cache, self.gamma.data());
        self.gamma.accumulate_grad(&gg);
        self.beta.accumulate_grad(&gb);
        Ok(gi)
    }

    /// gamma, beta, running mean, running variance.
    pub fn float_count(&self) -> usize {
        4 * self.channels()
    }
}

impl<T: Scalar> Parameterized<T> for BatchNorm<T> {
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[derive(Clone, Debug)]
struct ConvPCache<T> {
    input: Vec<T>,
    dims: (usize, usize, usize, usize),
    argmax: Vec<u32>,
    pre_activation: Vec<T>,
}

/// Fused binary convolution-pool block.
#[derive(Clone, Debug)]
pub struct ConvPBlock<T> {
    pub weights: BinaryWeights<T>,
    pub bn: BatchNorm<T>,
    cache: Option<ConvPCache<T>>,
}

impl<T: Scalar> ConvPBlock<T> {
    pub fn new<R: Rng>(rng: &mut R, in_channels: usize, filters: usize, bn: BnConfig) -> Self {
        let len = filters * in_channels * 9;
        let latent = Tensor::parameter(
            &[filters, in_channels, 3, 3],
            init_uniform(rng, len, in_channels * 9),
        )
        .unwrap();
        Self::from_parts(BinaryWeights::from_latent(latent), BatchNorm::new(filters, bn))
    }

    pub fn from_parts(weights: BinaryWeights<T>, bn: BatchNorm<T>) -> Self {
        Self {
            weights,
            bn,
            cache: None,
        }
    }

    pub fn filters(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Returns `(pre_activation, argmax, output shape)`.
    fn pre_activation(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Vec<T>, Vec<u32>, Vec<usize>)> {
        let dims = x.dims4("convp")?;
        let f = check_weights(dims, self.weights.shape())?;
        let conv = conv3x3_forward(x.data(), dims, &self.weights.signs(), f);
        let (pooled, argmax) = maxpool_forward(&conv, (dims.0, f, dims.2, dims.3));
        let shape = vec![dims.0, f, pooled_extent(dims.2), pooled_extent(dims.3)];
        let normed = match mode {
            Mode::Train => self.bn.forward(&pooled, &shape, mode)?,
            Mode::Infer => self.bn.infer(&pooled, &shape)?,
        };
        Ok((normed, argmax, shape))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Infer {
            return self.infer(x);
        }
        let (pre, argmax, shape) = self.pre_activation(x, mode)?;
        let out = pre.iter().map(|&v| sign(v)).collect();
        self.cache = Some(ConvPCache {
            input: x.data().to_vec(),
            dims: x.dims4("convp")?,
            argmax,
            pre_activation: pre,
        });
        Tensor::new(&shape, out)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = x.dims4("convp")?;
        let f = check_weights(dims, self.weights.shape())?;
        let conv = conv3x3_forward(x.data(), dims, &self.weights.signs(), f);
        let (pooled, _) = maxpool_forward(&conv, (dims.0, f, dims.2, dims.3));
        let shape = [dims.0, f, pooled_extent(dims.2), pooled_extent(dims.3)];
        let normed = self.bn.infer(&pooled, &shape)?;
        Tensor::new(&shape, normed.into_iter().map(sign).collect())
    }

    /// Backpropagates a gradient on the block's binary output. Returns the
    /// input gradient when `want_input` is set.
    pub fn backward(&mut self, grad_out: &[T], want_input: bool) -> Result<Option<Vec<T>>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| shape_err("convp", "backward without a training forward"))?;
        let (n, c, h, w) = cache.dims;
        let f = self.filters();
        let g = binarize_backward(grad_out, &cache.pre_activation);
        let g = self.bn.backward(&g)?;
        let g = maxpool_backward(&g, &cache.argmax, n * f * h * w);
        let gw = conv3x3_backward_weights(&g, &cache.input, cache.dims, f);
        self.weights.accumulate_sign_grad(&gw);
        if want_input {
            let signs = self.weights.signs();
            Ok(Some(conv3x3_backward_input(&g, (n, c, h, w), &signs, f)))
        } else {
            Ok(None)
        }
    }
}

impl<T: Scalar> Parameterized<T> for ConvPBlock<T> {
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = vec![self.weights.latent_mut()];
        p.extend(self.bn.params_mut());
        p
    }

    fn rebinarize(&mut self) {
        self.weights.rebinarize();
    }
}

#[derive(Clone, Debug)]
struct FcCache<T> {
    input: Vec<T>,
    n: usize,
    pre_activation: Vec<T>,
}

/// Fused binary fully connected block: `N x D -> N x K`.
#[derive(Clone, Debug)]
pub struct FcBlock<T> {
    pub weights: BinaryWeights<T>,
    pub bn: BatchNorm<T>,
    /// When false the block emits batch-normalized floats (exit head).
    pub activate: bool,
    cache: Option<FcCache<T>>,
}

impl<T: Scalar> FcBlock<T> {
    pub fn new<R: Rng>(rng: &mut R, inputs: usize, outputs: usize, activate: bool, bn: BnConfig) -> Self {
        let latent =
            Tensor::parameter(&[inputs, outputs], init_uniform(rng, inputs * outputs, inputs)).unwrap();
        Self::from_parts(BinaryWeights::from_latent(latent), BatchNorm::new(outputs, bn), activate)
    }

    pub fn from_parts(weights: BinaryWeights<T>, bn: BatchNorm<T>, activate: bool) -> Self {
        Self {
            weights,
            bn,
            activate,
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[1]
    }

    fn dense(&self, x: &Tensor<T>) -> Result<(usize, Vec<T>)> {
        let n = x.shape().first().copied().unwrap_or(0);
        let d = if n == 0 { 0 } else { x.len() / n };
        if d != self.inputs() {
            return Err(shape_err(
                "fc",
                format!("{} inputs expected, got {:?}", self.inputs(), x.shape()),
            ));
        }
        let k = self.outputs();
        Ok((n, linear_forward(x.data(), (n, d, 1), &self.weights.signs(), k, None)))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Infer {
            return self.infer(x);
        }
        let (n, z) = self.dense(x)?;
        let shape = [n, self.outputs()];
        let pre = self.bn.forward(&z, &shape, mode)?;
        let out = if self.activate {
            pre.iter().map(|&v| sign(v)).collect()
        } else {
            pre.clone()
        };
        self.cache = Some(FcCache {
            input: x.data().to_vec(),
            n,
            pre_activation: pre,
        });
        Tensor::new(&shape, out)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, z) = self.dense(x)?;
        let shape = [n, self.outputs()];
        let pre = self.bn.infer(&z, &shape)?;
        let out = if self.activate {
            pre.into_iter().map(sign).collect()
        } else {
            pre
        };
        Tensor::new(&shape, out)
    }

    pub fn backward(&mut self, grad_out: &[T], want_input: bool) -> Result<Option<Vec<T>>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| shape_err("fc", "backward without a training forward"))?;
        let g = if self.activate {
            binarize_backward(grad_out, &cache.pre_activation)
        } else {
            grad_out.to_vec()
        };
        let g = self.bn.backward(&g)?;
        let (d, k) = (self.inputs(), self.outputs());
        let (gw, _) = linear_backward_params(&g, &cache.input, (cache.n, d, 1), k);
        self.weights.accumulate_sign_grad(&gw);
        if want_input {
            Ok(Some(linear_backward_input(&g, (cache.n, d, 1), &self.weights.signs(), k)))
        } else {
            Ok(None)
        }
    }
}

impl<T: Scalar> Parameterized<T> for FcBlock<T> {
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = vec![self.weights.latent_mut()];
        p.extend(self.bn.params_mut());
        p
    }

    fn rebinarize(&mut self) {
        self.weights.rebinarize();
    }
}

/// Float dense layer over axis 1 with bias: `N x In x S -> N x Out x S`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    cache: Option<(Vec<T>, usize, usize)>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        let weight =
            Tensor::parameter(&[inputs, outputs], init_uniform(rng, inputs * outputs, inputs)).unwrap();
        let bias = Tensor::parameter(&[outputs], vec![T::zero(); outputs]).unwrap();
        Self::from_parts(weight, bias)
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Self {
            weight,
            bias,
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    fn layout(&self, shape: &[usize]) -> Result<(usize, usize, Vec<usize>)> {
        if shape.len() < 2 || shape[1] != self.inputs() {
            return Err(shape_err(
                "linear",
                format!("{} inputs expected on axis 1, got {:?}", self.inputs(), shape),
            ));
        }
        let s = shape[2..].iter().product();
        let mut out = shape.to_vec();
        out[1] = self.outputs();
        Ok((shape[0], s, out))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, s, out_shape) = self.layout(x.shape())?;
        let y = linear_forward(
            x.data(),
            (n, self.inputs(), s),
            self.weight.data(),
            self.outputs(),
            Some(self.bias.data()),
        );
        Tensor::new(&out_shape, y)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        if mode == Mode::Train {
            let (n, s, _) = self.layout(x.shape())?;
            self.cache = Some((x.data().to_vec(), n, s));
        }
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &[T], want_input: bool) -> Result<Option<Vec<T>>> {
        let (input, n, s) = self
            .cache
            .take()
            .ok_or_else(|| shape_err("linear", "backward without a training forward"))?;
        let (d, k) = (self.inputs(), self.outputs());
        let (gw, gb) = linear_backward_params(grad_out, &input, (n, d, s), k);
        self.weight.accumulate_grad(&gw);
        self.bias.accumulate_grad(&gb);
        if want_input {
            Ok(Some(linear_backward_input(grad_out, (n, d, s), self.weight.data(), k)))
        } else {
            Ok(None)
        }
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
