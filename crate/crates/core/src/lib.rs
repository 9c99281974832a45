//! Trajectory-forecasting masked autoencoder with parameter-efficient
//! fine-tuning (prompts, parallel adapters, selective unfreezing), built on
//! a small CPU autodiff core.

pub mod ablation;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod embed;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod io;
pub mod model;
pub mod peft;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
