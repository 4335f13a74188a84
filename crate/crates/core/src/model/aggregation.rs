//! Fusing per-device outputs: componentwise max (MP), mean (AP), or
//! concatenation followed by a learned projection back to the input width
//! (CC).
//!
//! Inputs are `N x C x ...` tensors, one per device. MP and AP reduce
//! elementwise over the active devices. CC concatenates along axis 1 in
//! device order, zero-filling inactive slots, then mixes channels with a
//! float dense layer applied at every spatial position.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::block::{Linear, Parameterized};
use crate::tensor::{Mode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AggregationKind {
    Max,
    Average,
    Concat,
}

impl AggregationKind {
    pub const ALL: [AggregationKind; 3] = [Self::Max, Self::Average, Self::Concat];

    pub fn code(self) -> u8 {
        match self {
            Self::Max => 0,
            Self::Average => 1,
            Self::Concat => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for AggregationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Max => "MP",
            Self::Average => "AP",
            Self::Concat => "CC",
        })
    }
}

impl FromStr for AggregationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MP" | "MAX" => Ok(Self::Max),
            "AP" | "AVG" | "AVERAGE" => Ok(Self::Average),
            "CC" | "CONCAT" => Ok(Self::Concat),
            other => Err(Error::InvalidArgument(format!(
                "unknown aggregation scheme {:?} (expected MP, AP or CC)",
                other
            ))),
        }
    }
}

#[derive(Clone, Debug)]
struct AggCache {
    active: Vec<bool>,
    /// MP only: winning device per output element.
    winner: Vec<u8>,
    shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Aggregator<T> {
    pub kind: AggregationKind,
    /// Present exactly for CC: `(n * width) -> width`.
    pub projection: Option<Linear<T>>,
    cache: Option<AggCache>,
}

impl<T: Scalar> Aggregator<T> {
    pub fn new<R: Rng>(rng: &mut R, kind: AggregationKind, inputs: usize, width: usize) -> Self {
        let projection = (kind == AggregationKind::Concat).then(|| Linear::new(rng, inputs * width, width));
        Self::from_parts(kind, projection)
    }

    pub fn from_parts(kind: AggregationKind, projection: Option<Linear<T>>) -> Self {
        Self {
            kind,
            projection,
            cache: None,
        }
    }

    fn check(&self, inputs: &[&Tensor<T>], active: &[bool]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::Empty("aggregation inputs"));
        }
        if active.len() != inputs.len() {
            return Err(shape_err(
                "aggregate",
                format!("{} inputs but {} activity flags", inputs.len(), active.len()),
            ));
        }
        if !active.iter().any(|&a| a) {
            return Err(Error::InvalidArgument("every aggregated device has failed".into()));
        }
        let shape = inputs[0].shape();
        if let Some(bad) = inputs.iter().find(|t| t.shape() != shape) {
            return Err(shape_err(
                "aggregate",
                format!("input shapes differ: {:?} vs {:?}", shape, bad.shape()),
            ));
        }
        if let Some(p) = &self.projection {
            if shape.len() < 2 || p.inputs() != inputs.len() * shape[1] {
                return Err(shape_err(
                    "aggregate_cc",
                    format!(
                        "projection takes {} channels, concatenation gives {} x {:?}",
                        p.inputs(),
                        inputs.len(),
                        shape
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Returns the fused tensor and, for MP, the winning device per element.
    fn reduce(&self, inputs: &[&Tensor<T>], active: &[bool]) -> Result<(Tensor<T>, Vec<u8>)> {
        let shape = inputs[0].shape().to_vec();
        let len = inputs[0].len();
        match self.kind {
            AggregationKind::Max => {
                let mut out = vec![T::neg_infinity(); len];
                let mut winner = vec![0u8; len];
                for (d, t) in inputs.iter().enumerate().filter(|(d, _)| active[*d]) {
                    for (k, &v) in t.data().iter().enumerate() {
                        // strict comparison keeps the lowest device on ties
                        if v > out[k] {
                            out[k] = v;
                            winner[k] = d as u8;
                        }
                    }
                }
                Ok((Tensor::new(&shape, out)?, winner))
            }
            AggregationKind::Average => {
                let count = T::from_usize(active.iter().filter(|&&a| a).count()).unwrap();
                let mut out = vec![T::zero(); len];
                for (_, t) in inputs.iter().enumerate().filter(|(d, _)| active[*d]) {
                    for (o, &v) in out.iter_mut().zip(t.data()) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|v| *v /= count);
                Ok((Tensor::new(&shape, out)?, Vec::new()))
            }
            AggregationKind::Concat => Ok((concat_channels(inputs, active)?, Vec::new())),
        }
    }

    pub fn infer(&self, inputs: &[&Tensor<T>], active: &[bool]) -> Result<Tensor<T>> {
        self.check(inputs, active)?;
        let (fused, _) = self.reduce(inputs, active)?;
        match &self.projection {
            Some(p) => p.infer(&fused),
            None => Ok(fused),
        }
    }

    pub fn forward(&mut self, inputs: &[&Tensor<T>], active: &[bool], mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Infer {
            return self.infer(inputs, active);
        }
        self.check(inputs, active)?;
        let (fused, winner) = self.reduce(inputs, active)?;
        self.cache = Some(AggCache {
            active: active.to_vec(),
            winner,
            shape: inputs[0].shape().to_vec(),
        });
        match self.projection.as_mut() {
            Some(p) => p.forward(&fused, mode),
            None => Ok(fused),
        }
    }

    /// Per-input gradients; `None` for inactive inputs.
    pub fn backward(&mut self, grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| shape_err("aggregate", "backward without a training forward"))?;
        let n = cache.active.len();
        let mut grads: Vec<Option<Vec<T>>> = cache
            .active
            .iter()
            .map(|&a| a.then(|| vec![T::zero(); cache.shape.iter().product()]))
            .collect();
        match self.kind {
            AggregationKind::Max => {
                for (k, (&g, &w)) in grad_out.iter().zip(&cache.winner).enumerate() {
                    grads[w as usize].as_mut().expect("winner is active")[k] = g;
                }
            }
            AggregationKind::Average => {
                let count = T::from_usize(cache.active.iter().filter(|&&a| a).count()).unwrap();
                for g in grads.iter_mut().flatten() {
                    for (gi, &go) in g.iter_mut().zip(grad_out) {
                        *gi = go / count;
                    }
                }
            }
            AggregationKind::Concat => {
                let p = self.projection.as_mut().expect("CC has a projection");
                let gcat = p.backward(grad_out, true)?.expect("input grad requested");
                let (rows, c) = (cache.shape[0], cache.shape[1]);
                let s: usize = cache.shape[2..].iter().product();
                for (d, g) in grads.iter_mut().enumerate() {
                    if let Some(g) = g {
                        for r in 0..rows {
                            let src = &gcat[(r * n * c + d * c) * s..][..c * s];
                            g[r * c * s..][..c * s].copy_from_slice(src);
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Concatenates `N x C x S` inputs into `N x (n*C) x S`, zero-filling
/// inactive slots.
fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>], active: &[bool]) -> Result<Tensor<T>> {
    let shape = inputs[0].shape();
    let (rows, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let n = inputs.len();
    let mut out = vec![T::zero(); rows * n * c * s];
    for r in 0..rows {
        for (d, t) in inputs.iter().enumerate() {
            if active[d] {
                out[(r * n * c + d * c) * s..][..c * s].copy_from_slice(&t.data()[r * c * s..][..c * s]);
            }
        }
    }
    let mut cat_shape = shape.to_vec();
    cat_shape[1] = n * c;
    Tensor::new(&cat_shape, out)
}

impl<T: Scalar> Parameterized<T> for Aggregator<T> {
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self.projection.as_mut() {
            Some(p) => p.params_mut(),
            None => Vec::new(),
        }
    }
}

fn as_rows<T: Scalar>(vectors: &[Vec<T>]) -> Result<Vec<Tensor<T>>> {
    if vectors.is_empty() {
        return Err(Error::Empty("aggregation inputs"));
    }
    vectors.iter().map(|v| Tensor::new(&[1, v.len()], v.clone())).collect()
}

fn run<T: Scalar>(agg: &Aggregator<T>, vectors: &[Vec<T>]) -> Result<Vec<T>> {
    let rows = as_rows(vectors)?;
    let refs: Vec<&Tensor<T>> = rows.iter().collect();
    Ok(agg.infer(&refs, &vec![true; refs.len()])?.into_data())
}

/// Componentwise maximum of equal-length vectors.
pub fn aggregate_mp<T: Scalar>(vectors: &[Vec<T>]) -> Result<Vec<T>> {
    run(&Aggregator::from_parts(AggregationKind::Max, None), vectors)
}

/// Componentwise mean of equal-length vectors.
pub fn aggregate_ap<T: Scalar>(vectors: &[Vec<T>]) -> Result<Vec<T>> {
    run(&Aggregator::from_parts(AggregationKind::Average, None), vectors)
}

/// Concatenation in device order followed by `projection` (`n*d -> d`).
pub fn aggregate_cc<T: Scalar>(vectors: &[Vec<T>], projection: &Linear<T>) -> Result<Vec<T>> {
    run(
        &Aggregator::from_parts(AggregationKind::Concat, Some(projection.clone())),
        vectors,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn max_pooling_examples() {
        assert_eq!(aggregate_mp(&[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap(), vec![3.0, 2.0]);
        assert_eq!(aggregate_mp(&[vec![1.0f32, -2.0, 5.0]]).unwrap(), vec![1.0, -2.0, 5.0]);
    }

    #[test]
    fn average_pooling_examples() {
        assert_eq!(aggregate_ap(&[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap(), vec![2.0, 1.0]);
        let v = vec![0.25f64, -4.0, 9.5];
        assert_eq!(aggregate_ap(&vec![v.clone(); 5]).unwrap(), v);
    }

    #[test]
    fn concat_with_first_block_projection() {
        // identity on the first device's block, zero on the second
        let w = Tensor::parameter(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::parameter(&[2], vec![0.0; 2]).unwrap();
        let p = Linear::from_parts(w, b);
        assert_eq!(aggregate_cc(&[vec![1.0, 2.0], vec![3.0, 4.0]], &p).unwrap(), vec![1.0, 2.0]);
        assert_eq!(aggregate_cc(&[vec![0.0; 2], vec![0.0; 2]], &p).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn rejects_empty_and_mismatched_inputs() {
        assert!(aggregate_mp::<f32>(&[]).is_err());
        assert!(aggregate_ap(&[vec![1.0f32], vec![1.0, 2.0]]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Linear::<f64>::new(&mut rng, 6, 2);
        assert!(aggregate_cc(&[vec![1.0, 2.0], vec![3.0, 4.0]], &p).is_err());
    }

    #[test]
    fn concat_is_order_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Linear::<f64>::new(&mut rng, 6, 3);
        let a = vec![vec![1.0, 0.0, 2.0], vec![-1.0, 3.0, 0.5]];
        let b = vec![a[1].clone(), a[0].clone()];
        assert_ne!(aggregate_cc(&a, &p).unwrap(), aggregate_cc(&b, &p).unwrap());
    }

    #[test]
    fn max_gradient_goes_to_lowest_winning_device() {
        let mut agg = Aggregator::<f64>::from_parts(AggregationKind::Max, None);
        let a = Tensor::new(&[1, 3], vec![1.0, 5.0, 2.0]).unwrap();
        let b = Tensor::new(&[1, 3], vec![1.0, 4.0, 3.0]).unwrap();
        agg.forward(&[&a, &b], &[true, true], Mode::Train).unwrap();
        let g = agg.backward(&[10.0, 20.0, 30.0]).unwrap();
        assert_eq!(g[0].as_deref().unwrap(), &[10.0, 20.0, 0.0]);
        assert_eq!(g[1].as_deref().unwrap(), &[0.0, 0.0, 30.0]);
    }

    #[test]
    fn inactive_devices_are_excluded_or_zero_filled() {
        let a = Tensor::new(&[1, 2], vec![9.0, 9.0]).unwrap();
        let b = Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap();
        let mp = Aggregator::<f64>::from_parts(AggregationKind::Max, None);
        assert_eq!(mp.infer(&[&a, &b], &[false, true]).unwrap().data(), &[1.0, 3.0]);
        let ap = Aggregator::<f64>::from_parts(AggregationKind::Average, None);
        assert_eq!(ap.infer(&[&a, &b], &[false, true]).unwrap().data(), &[1.0, 3.0]);
        let w = Tensor::parameter(&[4, 2], vec![1.0; 8]).unwrap();
        let cc = Aggregator::from_parts(AggregationKind::Concat, Some(Linear::from_parts(w, Tensor::parameter(&[2], vec![0.0; 2]).unwrap())));
        assert_eq!(cc.infer(&[&a, &b], &[false, true]).unwrap().data(), &[4.0, 4.0]);
        assert!(mp.infer(&[&a, &b], &[false, false]).is_err());
    }

    #[test]
    fn scheme_names_round_trip() {
        for k in AggregationKind::ALL {
            assert_eq!(k.to_string().parse::<AggregationKind>().unwrap(), k);
            assert_eq!(AggregationKind::from_code(k.code()), Some(k));
        }
        assert!("XX".parse::<AggregationKind>().is_err());
    }

    fn brute_max(vs: &[Vec<f64>]) -> Vec<f64> {
        let mut out = Vec::new();
        for j in 0..vs[0].len() {
            let mut best = f64::NEG_INFINITY;
            for v in vs {
                if v[j] > best {
                    best = v[j];
                }
            }
            out.push(best);
        }
        out
    }

    proptest! {
        #[test]
        fn mp_matches_scan_and_dominates_ap(
            vs in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 6),
            seed in 0u64..1000,
        ) {
            let mp = aggregate_mp(&vs).unwrap();
            prop_assert_eq!(&mp, &brute_max(&vs));
            let ap = aggregate_ap(&vs).unwrap();
            for (a, m) in ap.iter().zip(&mp) {
                prop_assert!(a <= m);
            }
            // permutation invariance of MP and AP
            let mut perm = vs.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
            prop_assert_eq!(aggregate_mp(&perm).unwrap(), mp);
            let ap2 = aggregate_ap(&perm).unwrap();
            for (a, b) in ap.iter().zip(&ap2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cc_matches_concat_then_matmul(
            vs in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 4),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Linear::<f64>::new(&mut rng, 12, 3);
            let cat: Vec<f64> = vs.iter().flatten().copied().collect();
            let w = p.weight.data();
            let expect: Vec<f64> = (0..3)
                .map(|k| p.bias.data()[k] + (0..12).map(|i| cat[i] * w[i * 3 + k]).sum::<f64>())
                .collect();
            let got = aggregate_cc(&vs, &p).unwrap();
            for (g, e) in got.iter().zip(&expect) {
                prop_assert!((g - e).abs() < 1e-12);
            }
        }
    }
}
