//! Training: configuration, data handling, optimizer, digests,
//! checkpoints, and the staged pipeline driver.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod digest;
pub mod optim;
pub mod pipeline;

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
pub use config::{StageHyper, TrainingConfig};
pub use pipeline::{run_full, MetricsRecord, ModelState, PipelineReport};
