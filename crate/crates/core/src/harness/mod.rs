//! Synthetic data, episodes, training and evaluation around the pipeline.

pub mod config;
pub mod episodes;
pub mod evaluate;
pub mod pgm;
pub mod phantom;
pub mod slic;
pub mod train;

pub use config::RunConfig;
pub use evaluate::{evaluate, EvalReport};
pub use train::{train, Benchmark, TrainOutcome};
