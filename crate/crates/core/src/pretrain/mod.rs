//! Pretraining loop: schedules, optimizer, step composition and
//! checkpointing.

mod config;
mod engine;
mod optim;
mod schedule;
mod toy;

pub use config::{LossWeights, MaskConfig, RunConfig, TeacherConfig};
pub use engine::{
    batch_indices, init_state, make_batch, pretrain_run, read_loss_log, sample_masks, train_step, write_loss_log,
    RunOptions, RunOutput, StepLosses, TrainState, CHECKPOINT_FILE, DINO_HEAD, IBOT_HEAD, LOSS_LOG,
};
pub use optim::{clip_global_norm, decays, AdamHyper, AdamW};
pub use schedule::{Schedule, ScheduleKind};
pub use toy::{toy_ssl_run, ToyReport};
