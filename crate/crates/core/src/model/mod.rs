//! The partitioned multi-exit network and its training.

mod aggregation;
mod branch;
mod checkpoint;
mod ddnn;
mod train;

pub use aggregation::{aggregate_ap, aggregate_cc, aggregate_mp, AggregationKind, Aggregator};
pub use branch::{
    device_memory_bytes, feature_side, filter_output_size, stack_images, stack_views, BranchOutput, DeviceBranch,
};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use ddnn::{joint_loss, Architecture, DdnnModel, ExitLogits, JointLoss, LocalStage, SampleForward, MAX_DEVICES};
pub use train::{fit, train, train_individual, EpochStats, History, IndividualModel, TrainConfig};
