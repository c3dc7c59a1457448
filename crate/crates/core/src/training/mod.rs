//! Renderer and generator training, checkpoints, the synthetic dataset and
//! the gradient verification suite.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod generator;
pub mod grad_suite;
pub mod renderer;

pub use checkpoint::{config_hash, Checkpoint, CheckpointMeta};
pub use config::TrainConfig;
pub use dataset::SynthDataset;
pub use generator::{GenBatch, GeneratorTrainer};
pub use grad_suite::{grad_check_all, GradCheckConfig, GradCheckReport};
pub use renderer::{LossBreakdown, RenderBatch, RendererTrainer};
