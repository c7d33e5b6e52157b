//! Policy networks, their training loop and checkpoint format.

pub mod checkpoint;
mod cnn;
mod policy;
mod rasnet;
mod train;

pub use cnn::{CnnBaseline, CnnConfig, BUDGET_TOLERANCE};
pub use policy::{predict, ModelKind, Policy};
pub use rasnet::{
    ActionHead, Block, Fusion, GuidedAttention, RasNet, RasNetConfig, RasNetLayers, RasNetTrace, Stage, Stem,
};
pub use train::{
    loss_and_grad, overfit, stack_batch, train, EpochMetrics, LrSchedule, Optimizer, OptimizerConfig, Sample,
    TrainConfig,
};
