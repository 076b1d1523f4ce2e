//! Location targets, loss terms, the optimizer, and the training loop.

mod loss;
mod run;
mod sgd;
mod targets;

pub use loss::{total_loss, training_loss, FrozenMaskIou, GroundTruth, LossConfig, LossParts, LossValues};
pub use run::{default_milestones, MetricsRow, TrainConfig, Trainer, METRICS_HEADER};
pub use sgd::{Sgd, SgdConfig};
pub use targets::{
    centerness_target, fcos_assign_targets, grid_iou, mask_target, LevelTargets, LocationTargets, DEFAULT_RANGES,
};
