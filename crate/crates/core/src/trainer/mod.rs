//! Two-stage episodic training.

mod config;
mod train;

pub use config::{TrainConfig, FIELD_DOCS};
pub use train::{
    evaluate_episode, query_accuracy, stage1_episode, stage1_step, stage2_episode, stage2_step, step_episodes,
    steps_per_epoch, train_stage1, train_stage2, validation_episodes, verify_identity, EpisodeOutcome, MetricsLog,
    MetricsRow, TrainSummary,
};
