//! Data, training, checkpointing and export around the core model.

pub mod attention;
pub mod audit;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::Dataset;
pub use error::{HarnessError, Result};
pub use metrics::{MetricsLog, MetricsSummary};
pub use train::{evaluate, train, EvalReport, TrainOutcome};
