//! Experiment orchestration: configuration, training, task runners,
//! baselines and mask-ratio sweeps.

pub mod baselines;
pub mod config;
pub mod sweep;
pub mod tasks;
pub mod train;

pub use baselines::Baseline;
pub use config::ExperimentConfig;
pub use sweep::{sweep_mask_ratio, SweepRow};
pub use tasks::{run_baseline, run_task, Task, TaskOutcome, TaskSpec};
pub use train::{train, Artifacts, TrainOutcome};
