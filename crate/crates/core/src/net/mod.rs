//! Small MLPs with hand-written derivatives, optimizers and checkpoints.

mod checkpoint;
mod mlp;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mlp::{Activation, FieldNet, TimeEmbedding};
pub use optim::{LrSchedule, Optimizer, OptimizerConfig, OptimizerKind, StepInfo};
