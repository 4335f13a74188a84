//! Distributed deep neural networks: a jointly trained, multi-exit binary
//! network partitioned across simulated end devices and a cloud.
//!
//! - [`tensor`]: the layer kernels, fused binary blocks and Adam.
//! - [`model`]: device branches, MP/AP/CC aggregation, the full graph,
//!   joint training and checkpoints.
//! - [`policy`]: normalized-entropy early exit and communication cost.
//! - [`data`]: multi-view samples, the on-disk format and a synthetic
//!   generator.
//! - [`experiments`]: accuracy measures and the parameter sweeps.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix it
//! to `f32`, which training and inference use.

pub mod data;
pub mod error;
pub mod experiments;
pub mod model;
pub mod policy;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f32>;
pub type BinaryWeights = tensor::BinaryWeights<f32>;
pub type AdamState = tensor::AdamState<f32>;
pub type DeviceBranch = model::DeviceBranch<f32>;
pub type DdnnModel = model::DdnnModel<f32>;
pub type IndividualModel = model::IndividualModel<f32>;
