//! Desk-scale real-world blind super-resolution: adaptive multi-level
//! degradation synthesis, a miniature triangular/rectangular window-attention
//! generator, a pixel-wise semantic-aware U-Net discriminator, a
//! wavelet-augmented four-term loss, and a two-stage training plus
//! evaluation pipeline.

pub mod degradation;
pub mod error;
pub mod image;
pub mod imageops;
pub mod nn;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
