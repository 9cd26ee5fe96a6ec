//! Training loop, evaluation, checkpoints, and uncertainty analysis.

pub mod analysis;
pub mod config;
pub mod metrics;
pub mod run;

pub use analysis::{analyze_uncertainty, UncertaintyReport};
pub use config::TrainConfig;
pub use metrics::{metrics_csv, Confusion, Metrics, CSV_HEADER};
pub use run::{evaluate, heldout_scenes, train, train_step, Checkpoint, TrainState, Trainer};
