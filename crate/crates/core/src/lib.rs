//! Reward fine-tuning of score-based diffusion models by iterative tilting.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod gmm;
pub mod metrics;
pub mod model;
pub mod schedules;
pub mod tilting;

pub use error::{Error, Result};
