//! Instruction-driven image editing at desk scale: a region-aware
//! multimodal language model, a query bridge, time-aware and hybrid visual
//! conditioning, and a latent diffusion editor trained jointly.

pub mod ablation;
pub mod bridge;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod nn;
pub mod train;
pub mod vision;
pub mod vlm;

pub use config::{DetectMode, RunConfig};
pub use error::{EditError, Result};
