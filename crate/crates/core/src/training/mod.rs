//! Composite loss, AdamW, keep-ratio schedule and the training loop.

mod fit;
mod loss;
mod optim;
mod schedule;

pub use fit::{fit, Checkpoint, EpochRecord, FitConfig, RngState, TrainReport, TrainSettings, Trainer};
pub use loss::{
    class_weights_from_labels, combine_losses, load_balance_term, moe_load_balance_loss,
    sparsity_loss, total_loss, weighted_cross_entropy, LossConfig, LossParts,
};
pub use optim::{adamw_step, OptimizerConfig, OptimizerState};
pub use schedule::{sparsity_schedule, ScheduleConfig};
