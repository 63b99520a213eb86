//! Vision transformer training under patch masking, with hierarchical
//! token pruning for evaluation and fine-tuning.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod pruning;
pub mod scenes;
pub mod schedule;
pub mod train;

pub use config::ModelConfig;
pub use error::{CoreError, Result};
