//! Training orchestration: configuration, replay, the training loop,
//! evaluation, checkpoints, metrics, oracle verification and plots.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod metrics;
pub mod plot;
pub mod replay;
pub mod trainer;
pub mod verify;
