//! Dual-conditional latent diffusion for arbitrary style transfer, built to
//! run on a CPU at toy scale.
//!
//! A denoiser is conditioned at once on a content latent (compressed by a
//! small refiner) and on style statistics from a frozen extractor. Training
//! uses each image as its own content and style, randomly dropping one
//! condition so that two partial models are learned alongside the full one.
//! At inference the three predictions are combined with independent content
//! and style guidance scales.
//!
//! Everything runs in f64 on a small reverse-mode autodiff tape
//! ([`tensor`]).

pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod networks;
pub mod run;
pub mod sampler;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
