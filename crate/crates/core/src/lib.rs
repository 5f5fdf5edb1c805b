//! Dual-branch Swin Transformer for binary road segmentation.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod swin;
pub mod training;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{BranchConfig, DbSwin, ModelConfig};
