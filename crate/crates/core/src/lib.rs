//! Diffusion action planner for multi-task continuous control.
//!
//! A state-conditioned denoiser is pre-trained on reward-free, mixed-quality
//! trajectories from several tasks, then fine-tuned per task with a clipped
//! importance-sampled policy gradient over the denoising chain plus a
//! behavior-clone regularizer fed from the planner's own best episodes.

pub mod config;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod net;
pub mod planner;
pub mod pretrain;
pub mod schedule;
pub mod seed;
pub mod tasks;

pub use error::{Error, Result};
