//! Experiment harness: configuration, training loop, evaluation,
//! checkpoints, ablation grids and self-verification.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod train;
pub mod verify;

pub use ablate::{ablate, beta_sweep, standard_grid, AblationRow, AblationTable, DEFAULT_BETAS, DEFAULT_SEEDS};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{DatasetSpec, ExperimentConfig, Method, Switches};
pub use train::{
    consistency_report, evaluate, train, train_on, write_artifacts, ConsistencyReport, Evaluation, MetricsRow,
    TrainOutcome,
};
pub use verify::{verify, CheckResult, VerifyOptions, VerifyReport};
