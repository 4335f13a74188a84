//! The partitioned network: per-device branches, a local aggregator over
//! their class scores (local exit), and a cloud aggregator over their binary
//! feature maps feeding a stack of ConvP blocks and a float exit head.

use rand::Rng;

use super::aggregation::{AggregationKind, Aggregator};
use super::branch::{feature_side, stack_views, DeviceBranch};
use crate::data::MultiViewSample;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::block::{ConvPBlock, Linear, Parameterized};
use crate::tensor::{pooled_extent, softmax_cross_entropy, BnConfig, Mode, Tensor};

/// Hyperparameters fixing the shape of a [`DdnnModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub devices: usize,
    /// ConvP filters on every device.
    pub filters: usize,
    pub classes: usize,
    pub local: AggregationKind,
    pub cloud: AggregationKind,
    /// Filters of each cloud ConvP block, in order.
    pub cloud_filters: Vec<usize>,
    /// Loss weight of the local and the cloud exit.
    pub exit_weights: [f64; 2],
    pub bn: BnConfig,
}

pub const MAX_DEVICES: usize = 16;

impl Default for Architecture {
    fn default() -> Self {
        Self {
            devices: 6,
            filters: 4,
            classes: 3,
            local: AggregationKind::Max,
            cloud: AggregationKind::Concat,
            cloud_filters: vec![8, 16],
            exit_weights: [1.0, 1.0],
            bn: BnConfig::default(),
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(1..=MAX_DEVICES).contains(&self.devices) {
            return bad(format!("device count {} outside 1..={}", self.devices, MAX_DEVICES));
        }
        if self.filters == 0 || self.cloud_filters.contains(&0) {
            return bad("filter counts must be at least 1".into());
        }
        if self.classes < 2 {
            return bad(format!("{} classes; need at least 2", self.classes));
        }
        if self.exit_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || self.exit_weights.iter().all(|&w| w == 0.0) {
            return bad(format!("exit weights {:?} must be non-negative and not all zero", self.exit_weights));
        }
        Ok(())
    }

    /// Side of the cloud stack's final feature map.
    pub fn cloud_output_side(&self) -> usize {
        self.cloud_filters.iter().fold(feature_side(), |s, _| pooled_extent(s))
    }

    pub fn cloud_head_inputs(&self) -> usize {
        let side = self.cloud_output_side();
        self.cloud_filters.last().copied().unwrap_or(self.filters) * side * side
    }
}

/// Class scores at both exits for a batch, each `N x |C|`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitLogits<T> {
    pub local: Tensor<T>,
    pub cloud: Tensor<T>,
}

/// What the devices and the local aggregator produce before any cloud work.
#[derive(Clone, Debug)]
pub struct LocalStage<T> {
    pub logits: Tensor<T>,
    /// Per device `N x f x 16 x 16` binary maps (zeros for failed devices).
    pub features: Vec<Tensor<T>>,
}

/// Per-sample result of a full forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleForward<T> {
    pub local_logits: Vec<T>,
    pub cloud_logits: Vec<T>,
    pub device_features: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct JointLoss<T> {
    pub local: T,
    pub cloud: T,
    /// `w_local * local + w_cloud * cloud`.
    pub total: T,
    pub grad_local: Vec<T>,
    pub grad_cloud: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct DdnnModel<T> {
    pub arch: Architecture,
    /// Dataset view index feeding each branch.
    pub device_ids: Vec<usize>,
    pub branches: Vec<DeviceBranch<T>>,
    pub local_agg: Aggregator<T>,
    pub cloud_agg: Aggregator<T>,
    pub cloud_stack: Vec<ConvPBlock<T>>,
    pub cloud_head: Linear<T>,
}

impl<T: Scalar> DdnnModel<T> {
    /// Fresh model whose branch `i` reads view `device_ids[i]`.
    pub fn new<R: Rng>(arch: Architecture, device_ids: Vec<usize>, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        if device_ids.len() != arch.devices {
            return Err(Error::InvalidArgument(format!(
                "{} device ids for {} devices",
                device_ids.len(),
                arch.devices
            )));
        }
        let (n, f, c) = (arch.devices, arch.filters, arch.classes);
        let branches = (0..n).map(|_| DeviceBranch::new(rng, f, c, arch.bn)).collect();
        let local_agg = Aggregator::new(rng, arch.local, n, c);
        let cloud_agg = Aggregator::new(rng, arch.cloud, n, f);
        let mut cloud_stack = Vec::new();
        let mut channels = f;
        for &filters in &arch.cloud_filters {
            cloud_stack.push(ConvPBlock::new(rng, channels, filters, arch.bn));
            channels = filters;
        }
        let cloud_head = Linear::new(rng, arch.cloud_head_inputs(), c);
        Ok(Self {
            arch,
            device_ids,
            branches,
            local_agg,
            cloud_agg,
            cloud_stack,
            cloud_head,
        })
    }

    pub fn num_devices(&self) -> usize {
        self.branches.len()
    }

    pub fn exit_weights(&self) -> [T; 2] {
        self.arch.exit_weights.map(T::of)
    }

    fn check_active(&self, active: &[bool]) -> Result<()> {
        if active.len() != self.num_devices() {
            return Err(shape_err(
                "ddnn",
                format!("{} activity flags for {} devices", active.len(), self.num_devices()),
            ));
        }
        if !active.iter().any(|&a| a) {
            return Err(Error::InvalidArgument("every end device has failed".into()));
        }
        Ok(())
    }

    /// One `N x 3 x 32 x 32` batch per branch.
    pub fn gather_views(&self, samples: &[&MultiViewSample]) -> Result<Vec<Tensor<T>>> {
        if samples.is_empty() {
            return Err(Error::Empty("samples"));
        }
        if let Some(s) = samples.iter().find(|s| self.device_ids.iter().any(|&d| d >= s.num_devices())) {
            return Err(shape_err(
                "ddnn",
                format!(
                    "sample {} has {} views; model reads views {:?}",
                    s.id,
                    s.num_devices(),
                    self.device_ids
                ),
            ));
        }
        self.device_ids.iter().map(|&d| stack_views(samples, d)).collect()
    }

    /// Device branches plus local aggregation. Failed devices are skipped.
    pub fn local_stage(&self, views: &[Tensor<T>], active: &[bool]) -> Result<LocalStage<T>> {
        self.check_active(active)?;
        if views.len() != self.num_devices() {
            return Err(shape_err("ddnn", format!("{} view batches for {} devices", views.len(), self.num_devices())));
        }
        let n = views[0].shape()[0];
        let side = feature_side();
        let mut scores = Vec::with_capacity(views.len());
        let mut features = Vec::with_capacity(views.len());
        for ((branch, v), &on) in self.branches.iter().zip(views).zip(active) {
            if on {
                let out = branch.infer(v)?;
                scores.push(out.scores);
                features.push(out.features);
            } else {
                scores.push(Tensor::zeros(&[n, self.arch.classes]));
                features.push(Tensor::zeros(&[n, self.arch.filters, side, side]));
            }
        }
        let refs: Vec<&Tensor<T>> = scores.iter().collect();
        let logits = self.local_agg.infer(&refs, active)?;
        Ok(LocalStage { logits, features })
    }

    /// Cloud aggregation, cloud stack and cloud exit head.
    pub fn cloud_stage(&self, features: &[Tensor<T>], active: &[bool]) -> Result<Tensor<T>> {
        self.check_active(active)?;
        let refs: Vec<&Tensor<T>> = features.iter().collect();
        let mut x = self.cloud_agg.infer(&refs, active)?;
        for block in &self.cloud_stack {
            x = block.infer(&x)?;
        }
        let n = x.shape()[0];
        let flat = x.reshape(&[n, self.arch.cloud_head_inputs()])?;
        self.cloud_head.infer(&flat)
    }

    /// Both exits for a batch of samples, using frozen statistics.
    pub fn infer(&self, samples: &[&MultiViewSample], active: &[bool]) -> Result<ExitLogits<T>> {
        let views = self.gather_views(samples)?;
        let local = self.local_stage(&views, active)?;
        let cloud = self.cloud_stage(&local.features, active)?;
        Ok(ExitLogits {
            local: local.logits,
            cloud,
        })
    }

    /// Full inference pass for one sample with every device working.
    pub fn forward(&self, sample: &MultiViewSample) -> Result<SampleForward<T>> {
        let active = vec![true; self.num_devices()];
        let views = self.gather_views(&[sample])?;
        let local = self.local_stage(&views, &active)?;
        let cloud = self.cloud_stage(&local.features, &active)?;
        Ok(SampleForward {
            local_logits: local.logits.into_data(),
            cloud_logits: cloud.into_data(),
            device_features: local.features,
        })
    }

    /// Training-mode pass over every device, caching for [`Self::backward`].
    pub fn forward_train(&mut self, views: &[Tensor<T>]) -> Result<ExitLogits<T>> {
        if views.len() != self.num_devices() {
            return Err(shape_err("ddnn", format!("{} view batches for {} devices", views.len(), self.num_devices())));
        }
        let active = vec![true; self.num_devices()];
        let mut scores = Vec::with_capacity(views.len());
        let mut features = Vec::with_capacity(views.len());
        for (branch, v) in self.branches.iter_mut().zip(views) {
            let out = branch.forward(v, Mode::Train)?;
            scores.push(out.scores);
            features.push(out.features);
        }
        let refs: Vec<&Tensor<T>> = scores.iter().collect();
        let local = self.local_agg.forward(&refs, &active, Mode::Train)?;
        let refs: Vec<&Tensor<T>> = features.iter().collect();
        let mut x = self.cloud_agg.forward(&refs, &active, Mode::Train)?;
        for block in self.cloud_stack.iter_mut() {
            x = block.forward(&x, Mode::Train)?;
        }
        let n = x.shape()[0];
        let flat = x.reshape(&[n, self.arch.cloud_head_inputs()])?;
        let cloud = self.cloud_head.forward(&flat, Mode::Train)?;
        Ok(ExitLogits { local, cloud })
    }

    /// Weighted sum of the softmax cross entropy at each exit.
    pub fn joint_loss(&self, logits: &ExitLogits<T>, labels: &Tensor<T>) -> Result<JointLoss<T>> {
        joint_loss(logits, labels, self.exit_weights())
    }

    /// Backpropagates exit-logit gradients through the whole graph,
    /// accumulating into every parameter's gradient buffer.
    pub fn backward(&mut self, grad_local: &[T], grad_cloud: &[T]) -> Result<()> {
        let g = self.cloud_head.backward(grad_cloud, true)?.expect("input gradient requested");
        let mut g = g;
        for block in self.cloud_stack.iter_mut().rev() {
            g = block.backward(&g, true)?.expect("input gradient requested");
        }
        let feature_grads = self.cloud_agg.backward(&g)?;
        let score_grads = self.local_agg.backward(grad_local)?;
        for ((branch, gs), gf) in self.branches.iter_mut().zip(score_grads).zip(feature_grads) {
            let gs = gs.expect("all devices active in training");
            branch.backward(&gs, gf.as_deref())?;
        }
        Ok(())
    }
}

/// `w[0] * CE(local) + w[1] * CE(cloud)` with gradients for both exits.
pub fn joint_loss<T: Scalar>(logits: &ExitLogits<T>, labels: &Tensor<T>, weights: [T; 2]) -> Result<JointLoss<T>> {
    let local = softmax_cross_entropy(&logits.local, labels)?;
    let cloud = softmax_cross_entropy(&logits.cloud, labels)?;
    Ok(JointLoss {
        local: local.loss,
        cloud: cloud.loss,
        total: weights[0] * local.loss + weights[1] * cloud.loss,
        grad_local: local.grad.into_iter().map(|g| g * weights[0]).collect(),
        grad_cloud: cloud.grad.into_iter().map(|g| g * weights[1]).collect(),
    })
}

impl<T: Scalar> Parameterized<T> for DdnnModel<T> {
    /// Branches in device order, then the local projection, the cloud
    /// projection, the cloud blocks and the cloud head.
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = Vec::new();
        for b in self.branches.iter_mut() {
            p.extend(b.params_mut());
        }
        p.extend(self.local_agg.params_mut());
        p.extend(self.cloud_agg.params_mut());
        for b in self.cloud_stack.iter_mut() {
            p.extend(b.params_mut());
        }
        p.extend(self.cloud_head.params_mut());
        p
    }

    fn rebinarize(&mut self) {
        for b in self.branches.iter_mut() {
            b.rebinarize();
        }
        for b in self.cloud_stack.iter_mut() {
            b.rebinarize();
        }
    }
}
