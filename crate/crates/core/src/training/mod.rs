mod model;
mod optim;
mod run;

pub use model::{ModelConfig, TrainModel, CONV_WIDTH};
pub use optim::{adam_step, cosine_lr, AdamState, OptimConfig};
pub use run::{evaluate_loss, train, DataSizes, RunConfig, RunRecord, StopReason, TrainResult};
