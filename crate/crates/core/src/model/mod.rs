//! Transformer building blocks, model configuration and checkpoints.

pub mod checkpoint;
mod config;
pub mod layers;

pub use checkpoint::{Checkpoint, Component};
pub use config::ModelConfig;
