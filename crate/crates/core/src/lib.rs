pub mod bcma;
pub mod encoder;
pub mod error;
pub mod features;
pub mod fspa;
pub mod harness;
pub mod kmeans;
pub mod numerics;
pub mod pipeline;
pub mod ran;
pub mod segmenter;

pub use error::{Error, Result};
