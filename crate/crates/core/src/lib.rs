//! Temporal-visual conversion through a shared discrete latent space.
//!
//! Two autoencoders, one for image patches and one for series segments,
//! quantize into the same multi-head codebook. Index sequences extracted from
//! that frozen bundle are mapped across modalities by small alignment models,
//! which in turn drive series/image conversion, outpainting forecasts,
//! class pairing and latent style fusion.

pub mod alignment;
pub mod autoencoder;
pub mod classpair;
pub mod cli;
pub mod convert;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod par;
pub mod pipeline;
pub mod quantizer;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod tokenize;
pub mod training;

pub use error::{Error, Result};
