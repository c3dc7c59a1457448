//! Talking-face pipeline: an identity-adaptive implicit motion transfer
//! renderer and a flow-matching motion generator, on a small CPU tensor
//! substrate with reverse-mode gradients.

pub mod cli;
pub mod config;
pub mod encoders;
pub mod error;
pub mod identity_adapt;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod motion_generator;
pub mod motion_transfer;
pub mod nn;
pub mod numerics;
pub mod renderer;
pub mod synthesis;
pub mod training;

pub use error::{Error, Result};
