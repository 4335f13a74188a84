//! Confidence-gated hierarchical inference and communication accounting.
//!
//! Each end device sends its class scores (`4 |C|` bytes as 32-bit floats)
//! to the local aggregator. If the normalized entropy of the aggregated
//! distribution is at most the threshold the sample exits locally;
//! otherwise every device also ships its binary feature maps
//! (`f * o / 8` bytes) to the cloud, whose exit always classifies.

use std::path::Path;

use crate::data::MultiViewSample;
use crate::error::{Error, Result};
use crate::model::{filter_output_size, DdnnModel};
use crate::scalar::{argmax, Scalar};
use crate::tensor::softmax;

/// Largest deviation from 1 accepted for a probability vector's sum.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

/// `-sum x log x / log |C|` with `0 log 0 = 0`, clamped to `[0, 1]`.
pub fn normalized_entropy<T: Scalar>(probs: &[T]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "normalized entropy needs at least 2 classes, got {}",
            probs.len()
        )));
    }
    let mut sum = 0.0;
    let mut h = 0.0;
    for &p in probs {
        let p = p.as_f64();
        if !(p >= 0.0 && p.is_finite()) {
            return Err(Error::InvalidArgument(format!("probability {} is not in [0, 1]", p)));
        }
        sum += p;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::InvalidArgument(format!("probabilities sum to {}", sum)));
    }
    // the uniform distribution is the maximum by definition; summing
    // `p ln p` terms for it can land one ulp short of 1
    if probs.iter().all(|&p| p == probs[0]) {
        return Ok(1.0);
    }
    Ok((h / (probs.len() as f64).ln()).clamp(0.0, 1.0))
}

/// A sample exits when its entropy does not exceed the threshold.
pub fn should_exit(eta: f64, threshold: f64) -> bool {
    eta <= threshold
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitThresholds {
    pub local: f64,
}

impl ExitThresholds {
    pub fn new(local: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&local) {
            return Err(Error::InvalidArgument(format!("exit threshold {} outside [0, 1]", local)));
        }
        Ok(Self { local })
    }
}

/// The quantities the communication cost depends on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CommModel {
    pub classes: usize,
    pub filters: usize,
    /// Elements in one filter's output map.
    pub filter_output_size: usize,
}

impl CommModel {
    pub fn for_model<T: Scalar>(model: &DdnnModel<T>) -> Self {
        Self {
            classes: model.arch.classes,
            filters: model.arch.filters,
            filter_output_size: filter_output_size(),
        }
    }

    /// Bytes per device for a local exit: the float class scores.
    pub fn local_bytes(&self) -> f64 {
        4.0 * self.classes as f64
    }

    /// Bytes per device for the binary feature maps.
    pub fn feature_bytes(&self) -> f64 {
        (self.filters * self.filter_output_size) as f64 / 8.0
    }

    pub fn cloud_bytes(&self) -> f64 {
        self.local_bytes() + self.feature_bytes()
    }
}

/// `4 |C| + (1 - l) f o / 8` for a local-exit fraction `l`.
pub fn comm_cost(local_exit_fraction: f64, comm: &CommModel) -> Result<f64> {
    if !(0.0..=1.0).contains(&local_exit_fraction) {
        return Err(Error::InvalidArgument(format!(
            "local exit fraction {} outside [0, 1]",
            local_exit_fraction
        )));
    }
    Ok(comm.local_bytes() + (1.0 - local_exit_fraction) * comm.feature_bytes())
}

/// Rounds halves away from zero for non-negative byte counts.
pub fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor() as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitPoint {
    Local,
    Cloud,
}

impl ExitPoint {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Local => "local",
            Self::Cloud => "cloud",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceTrace {
    pub sample_id: String,
    pub predicted: usize,
    pub truth: usize,
    pub exit: ExitPoint,
    pub local_entropy: f64,
    /// Present exactly when the sample went to the cloud.
    pub cloud_entropy: Option<f64>,
    pub bytes_sent: f64,
}

impl InferenceTrace {
    pub fn correct(&self) -> bool {
        self.predicted == self.truth
    }
}

/// The two halves of a deployed DDNN, evaluated on demand.
pub trait ExitStages {
    /// What the devices hold on to in case the cloud is needed.
    type Pending;

    /// Device branches and local aggregation: the local exit's scores.
    fn local_exit(&self, sample: &MultiViewSample) -> Result<(Vec<f64>, Self::Pending)>;

    /// Cloud aggregation onwards: the cloud exit's scores.
    fn cloud_exit(&self, pending: Self::Pending) -> Result<Vec<f64>>;

    fn comm_model(&self) -> CommModel;
}

/// A model together with which of its end devices are working.
#[derive(Clone, Debug)]
pub struct Deployment<'a, T> {
    pub model: &'a DdnnModel<T>,
    pub active: Vec<bool>,
}

impl<'a, T: Scalar> Deployment<'a, T> {
    pub fn new(model: &'a DdnnModel<T>) -> Self {
        Self {
            model,
            active: vec![true; model.num_devices()],
        }
    }

    /// Marks the listed branch indices as failed.
    pub fn with_failures(model: &'a DdnnModel<T>, failed: &[usize]) -> Result<Self> {
        let mut d = Self::new(model);
        for &f in failed {
            *d.active.get_mut(f).ok_or_else(|| {
                Error::InvalidArgument(format!("failed device {} outside 0..{}", f, model.num_devices()))
            })? = false;
        }
        if !d.active.iter().any(|&a| a) {
            return Err(Error::InvalidArgument("every end device has failed".into()));
        }
        Ok(d)
    }
}

fn to_f64<T: Scalar>(v: Vec<T>) -> Vec<f64> {
    v.into_iter().map(|x| x.as_f64()).collect()
}

impl<T: Scalar> ExitStages for Deployment<'_, T> {
    type Pending = Vec<crate::tensor::Tensor<T>>;

    fn local_exit(&self, sample: &MultiViewSample) -> Result<(Vec<f64>, Self::Pending)> {
        let views = self.model.gather_views(&[sample])?;
        let stage = self.model.local_stage(&views, &self.active)?;
        Ok((to_f64(stage.logits.into_data()), stage.features))
    }

    fn cloud_exit(&self, pending: Self::Pending) -> Result<Vec<f64>> {
        Ok(to_f64(self.model.cloud_stage(&pending, &self.active)?.into_data()))
    }

    fn comm_model(&self) -> CommModel {
        CommModel::for_model(self.model)
    }
}

fn local_trace(sample_id: &str, truth: usize, local: &[f64], comm: &CommModel) -> Result<(InferenceTrace, f64)> {
    let eta = normalized_entropy(&softmax(local))?;
    Ok((
        InferenceTrace {
            sample_id: sample_id.to_string(),
            predicted: argmax(local),
            truth,
            exit: ExitPoint::Local,
            local_entropy: eta,
            cloud_entropy: None,
            bytes_sent: comm.local_bytes(),
        },
        eta,
    ))
}

fn escalate(trace: &mut InferenceTrace, cloud: &[f64], comm: &CommModel) -> Result<()> {
    trace.predicted = argmax(cloud);
    trace.exit = ExitPoint::Cloud;
    trace.cloud_entropy = Some(normalized_entropy(&softmax(cloud))?);
    trace.bytes_sent = comm.cloud_bytes();
    Ok(())
}

/// Runs the device/local/cloud procedure for one sample. The cloud stage
/// is evaluated only when the local exit is not confident enough.
pub fn hierarchical_infer<S: ExitStages>(
    stages: &S,
    sample: &MultiViewSample,
    thresholds: ExitThresholds,
) -> Result<InferenceTrace> {
    let comm = stages.comm_model();
    let (local, pending) = stages.local_exit(sample)?;
    let (mut trace, eta) = local_trace(&sample.id, sample.global_label as usize, &local, &comm)?;
    if !should_exit(eta, thresholds.local) {
        let cloud = stages.cloud_exit(pending)?;
        escalate(&mut trace, &cloud, &comm)?;
    }
    Ok(trace)
}

/// Scores at both exits for one sample, computed up front so that many
/// thresholds can be applied without re-running the network.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub truth: usize,
    pub local: Vec<f64>,
    pub cloud: Vec<f64>,
}

impl SampleOutcome {
    pub fn local_entropy(&self) -> Result<f64> {
        normalized_entropy(&softmax(&self.local))
    }

    /// The trace [`hierarchical_infer`] would produce for this sample.
    pub fn route(&self, thresholds: ExitThresholds, comm: &CommModel) -> Result<InferenceTrace> {
        let (mut trace, eta) = local_trace(&self.sample_id, self.truth, &self.local, comm)?;
        if !should_exit(eta, thresholds.local) {
            escalate(&mut trace, &self.cloud, comm)?;
        }
        Ok(trace)
    }
}

/// Threshold from `grid` with the best overall accuracy on `outcomes`; ties
/// go to the larger threshold (more local exits, less traffic).
pub fn threshold_search(outcomes: &[SampleOutcome], grid: &[f64], comm: &CommModel) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if grid.is_empty() {
        return Err(Error::Empty("threshold grid"));
    }
    let mut best: Option<(usize, f64)> = None;
    for &t in grid {
        let thresholds = ExitThresholds::new(t)?;
        let mut correct = 0;
        for o in outcomes {
            correct += o.route(thresholds, comm)?.correct() as usize;
        }
        let better = match best {
            None => true,
            Some((c, bt)) => correct > c || (correct == c && t > bt),
        };
        if better {
            best = Some((correct, t));
        }
    }
    Ok(best.expect("non-empty grid").1)
}

/// Threshold whose local-exit fraction on `outcomes` is closest to
/// `target`; on equal distance the smaller threshold wins.
///
/// The achievable fractions are steps at each sample's entropy, so the
/// candidates are those entropies (plus 0), and the fraction each admits is
/// counted by binary search in the sorted list.
pub fn threshold_for_exit_fraction(outcomes: &[SampleOutcome], target: f64) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut etas = outcomes.iter().map(|o| o.local_entropy()).collect::<Result<Vec<f64>>>()?;
    etas.sort_by(|a, b| a.partial_cmp(b).expect("finite entropy"));
    let n = etas.len() as f64;
    let mut best = (f64::INFINITY, 0.0);
    for &t in std::iter::once(&0.0).chain(etas.iter()) {
        let fraction = etas.partition_point(|&e| should_exit(e, t)) as f64 / n;
        let gap = (fraction - target).abs();
        if gap < best.0 {
            best = (gap, t);
        }
    }
    Ok(best.1)
}

/// One row per sample: `sample_id,predicted,true,exit,local_entropy,bytes`.
pub fn write_traces(traces: &[InferenceTrace], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "predicted", "true", "exit", "local_entropy", "bytes"])?;
    for t in traces {
        w.write_record([
            t.sample_id.clone(),
            t.predicted.to_string(),
            t.truth.to_string(),
            t.exit.as_str().to_string(),
            format!("{:.6}", t.local_entropy),
            format!("{}", t.bytes_sent),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const REFERENCE_COMM: CommModel = CommModel {
        classes: 3,
        filters: 4,
        filter_output_size: 256,
    };

    #[test]
    fn entropy_extremes_and_half_split() {
        assert_eq!(normalized_entropy(&[1.0 / 3.0; 3]).unwrap(), 1.0);
        assert_eq!(normalized_entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        let e = normalized_entropy(&[0.5, 0.5, 0.0]).unwrap();
        assert!((e - 2f64.ln() / 3f64.ln()).abs() < 1e-12);
        assert!((e - 0.63093).abs() < 1e-5);
    }

    #[test]
    fn entropy_rejects_non_distributions() {
        assert!(normalized_entropy(&[0.5, 0.6, 0.0]).is_err());
        assert!(normalized_entropy(&[1.5, -0.5]).is_err());
        assert!(normalized_entropy(&[1.0]).is_err());
        assert!(normalized_entropy(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn exit_rule_includes_the_boundary() {
        assert!(should_exit(0.4, 0.4));
        assert!(!should_exit(0.41, 0.4));
        assert!(should_exit(1.0, 1.0));
        assert!(!should_exit(1e-9, 0.0));
        assert!(ExitThresholds::new(1.2).is_err());
    }

    #[test]
    fn eq1_end_points_and_rounding() {
        assert_eq!(comm_cost(0.0, &REFERENCE_COMM).unwrap(), 140.0);
        assert_eq!(comm_cost(1.0, &REFERENCE_COMM).unwrap(), 12.0);
        assert_eq!(round_half_up(comm_cost(0.6082, &REFERENCE_COMM).unwrap()), 62);
        assert_eq!(round_half_up(comm_cost(0.8304, &REFERENCE_COMM).unwrap()), 34);
        assert_eq!(round_half_up(2.5), 3);
        assert!(comm_cost(1.1, &REFERENCE_COMM).is_err());
    }

    #[test]
    fn single_value_grid_is_returned() {
        let o = SampleOutcome {
            sample_id: "a".into(),
            truth: 0,
            local: vec![1.0, 0.0, 0.0],
            cloud: vec![0.0, 1.0, 0.0],
        };
        assert_eq!(threshold_search(&[o.clone()], &[0.3], &REFERENCE_COMM).unwrap(), 0.3);
        assert!(threshold_search(&[o], &[], &REFERENCE_COMM).is_err());
    }

    #[test]
    fn always_confident_model_picks_largest_threshold() {
        let outcomes: Vec<SampleOutcome> = (0..5)
            .map(|i| SampleOutcome {
                sample_id: i.to_string(),
                truth: i % 3,
                local: (0..3).map(|c| if c == i % 3 { 60.0 } else { 0.0 }).collect(),
                cloud: vec![0.0, 0.0, 1.0],
            })
            .collect();
        let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(threshold_search(&outcomes, &grid, &REFERENCE_COMM).unwrap(), 1.0);
    }

    #[test]
    fn exit_fraction_search_hits_closest_step() {
        let outcomes: Vec<SampleOutcome> = (0..8)
            .map(|i| SampleOutcome {
                sample_id: i.to_string(),
                truth: 0,
                local: vec![i as f64 * 0.5, 0.0, 0.0],
                cloud: vec![0.0; 3],
            })
            .collect();
        let t = threshold_for_exit_fraction(&outcomes, 0.75).unwrap();
        let exited = outcomes.iter().filter(|o| should_exit(o.local_entropy().unwrap(), t)).count();
        assert_eq!(exited, 6);
    }

    proptest! {
        #[test]
        fn entropy_is_permutation_invariant(raw in proptest::collection::vec(0.0f64..1.0, 3), rot in 0usize..3) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-3;
            let p: Vec<f64> = raw.iter().map(|v| (v + 1e-3 / 3.0) / total).collect();
            let mut q = p.clone();
            q.rotate_left(rot);
            q.swap(0, 2);
            let a = normalized_entropy(&p).unwrap();
            prop_assert!((a - normalized_entropy(&q).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn bytes_take_one_of_two_values(local in proptest::collection::vec(-5.0f64..5.0, 3), t in 0.0f64..=1.0) {
            let o = SampleOutcome { sample_id: "x".into(), truth: 1, local, cloud: vec![0.1, 0.2, 0.3] };
            let trace = o.route(ExitThresholds::new(t).unwrap(), &REFERENCE_COMM).unwrap();
            match trace.exit {
                ExitPoint::Local => {
                    prop_assert_eq!(trace.bytes_sent, 12.0);
                    prop_assert!(trace.cloud_entropy.is_none());
                }
                ExitPoint::Cloud => {
                    prop_assert_eq!(trace.bytes_sent, 140.0);
                    prop_assert_eq!(trace.predicted, 2);
                }
            }
        }
    }
}
