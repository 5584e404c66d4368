//! Training schedules, inference, evaluation, ablations and checkpoints for
//! the two-stage scene-aware pose estimator.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod estimator;
pub mod evaluate;
pub mod infer;
pub mod train;
pub mod windows;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use error::{PipelineError, Result};
pub use estimator::Estimator;
