//! One end device: a ConvP block whose binary feature maps go to the cloud,
//! followed by a binary exit head whose class scores go to the local
//! aggregator.

use rand::Rng;

use crate::data::{Image, MultiViewSample, IMAGE_SIDE};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::block::{ConvPBlock, FcBlock, Parameterized};
use crate::tensor::{pooled_extent, BnConfig, Mode, Tensor};

/// Spatial extent of one device feature map for a 32x32 view.
pub fn feature_side() -> usize {
    pooled_extent(IMAGE_SIDE)
}

/// Elements per filter map sent to the cloud (16 x 16).
pub fn filter_output_size() -> usize {
    feature_side() * feature_side()
}

#[derive(Clone, Debug)]
pub struct DeviceBranch<T> {
    pub conv: ConvPBlock<T>,
    /// Binary dense layer with batch norm and no activation: `f*16*16 -> |C|`.
    pub head: FcBlock<T>,
}

/// Output of a device branch for a batch.
#[derive(Clone, Debug)]
pub struct BranchOutput<T> {
    /// `N x f x 16 x 16`, values in {-1, +1}.
    pub features: Tensor<T>,
    /// `N x |C|` exit-head scores.
    pub scores: Tensor<T>,
}

impl<T: Scalar> DeviceBranch<T> {
    pub fn new<R: Rng>(rng: &mut R, filters: usize, classes: usize, bn: BnConfig) -> Self {
        let conv = ConvPBlock::new(rng, 3, filters, bn);
        let head = FcBlock::new(rng, filters * filter_output_size(), classes, false, bn);
        Self { conv, head }
    }

    pub fn filters(&self) -> usize {
        self.conv.filters()
    }

    pub fn classes(&self) -> usize {
        self.head.outputs()
    }

    pub fn forward(&mut self, views: &Tensor<T>, mode: Mode) -> Result<BranchOutput<T>> {
        let features = self.conv.forward(views, mode)?;
        let scores = self.head.forward(&features, mode)?;
        Ok(BranchOutput { features, scores })
    }

    pub fn infer(&self, views: &Tensor<T>) -> Result<BranchOutput<T>> {
        let features = self.conv.infer(views)?;
        let scores = self.head.infer(&features)?;
        Ok(BranchOutput { features, scores })
    }

    /// Backpropagates gradients on the scores and (optionally) on the
    /// feature maps sent to the cloud.
    pub fn backward(&mut self, grad_scores: &[T], grad_features: Option<&[T]>) -> Result<()> {
        let mut g = self
            .head
            .backward(grad_scores, true)?
            .expect("input gradient requested");
        if let Some(extra) = grad_features {
            if extra.len() != g.len() {
                return Err(shape_err(
                    "device branch",
                    format!("feature gradient has {} values, expected {}", extra.len(), g.len()),
                ));
            }
            for (a, &b) in g.iter_mut().zip(extra) {
                *a += b;
            }
        }
        self.conv.backward(&g, false)?;
        Ok(())
    }
}

impl<T: Scalar> Parameterized<T> for DeviceBranch<T> {
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.conv.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    fn rebinarize(&mut self) {
        self.conv.rebinarize();
        self.head.rebinarize();
    }
}

/// Bytes an end device stores: packed binary weights of both layers plus
/// four 32-bit floats (gamma, beta, running mean, running variance) per
/// batch-norm channel.
pub fn device_memory_bytes<T: Scalar>(branch: &DeviceBranch<T>) -> usize {
    branch.conv.weights.packed_bytes()
        + 4 * branch.conv.bn.float_count()
        + branch.head.weights.packed_bytes()
        + 4 * branch.head.bn.float_count()
}

/// Stacks one device's view of each sample into an `N x 3 x 32 x 32` batch.
pub fn stack_views<T: Scalar>(samples: &[&MultiViewSample], device: usize) -> Result<Tensor<T>> {
    let images: Vec<&Image> = samples
        .iter()
        .map(|s| {
            s.views.get(device).ok_or_else(|| {
                shape_err("views", format!("sample {} has no view for device {}", s.id, device))
            })
        })
        .collect::<Result<_>>()?;
    stack_images(&images)
}

pub fn stack_images<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let plane = 3 * IMAGE_SIDE * IMAGE_SIDE;
    let mut data = vec![T::zero(); images.len() * plane];
    for (img, out) in images.iter().zip(data.chunks_exact_mut(plane)) {
        img.write_normalized(out);
    }
    Tensor::new(&[images.len(), 3, IMAGE_SIDE, IMAGE_SIDE], data)
}
