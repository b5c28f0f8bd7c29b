//! Sketch-guided melody inpainting.
//!
//! Measures are encoded by a factorized VAE into pitch and rhythm latents,
//! missing measures are predicted in latent space from the surrounding
//! context, and a transformer connector merges those predictions with
//! optional user sketches before decoding.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod connector;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod inpainter;
pub mod nn;
pub mod pipeline;
pub mod training;
pub mod vae;

pub use error::{Error, Result};
