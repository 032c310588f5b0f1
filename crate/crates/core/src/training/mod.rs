//! Optimization of the meta-learner and the two baselines.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::TrainConfig;
pub use model::{Batch, BatchInputs, ConcatNet, GlobalHead, Model, ModelBody, ModelKind, StepOutput};
pub use train::{
    evaluate, lambda_delta_sweep, predict, step, train, train_baseline_concat, train_from, write_history_csv,
    write_sweep_csv, EpochStats, SweepRow, TrainedModel,
};
