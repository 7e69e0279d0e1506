//! Unsupervised multi-source data-to-text and text-to-data conversion.
//!
//! A single weight-shared transformer encoder-decoder learns both
//! directions from non-parallel text and structured records, trained with
//! denoising and iterative back-translation. Text generation is conditioned
//! on a low-dimensional Gaussian style latent regularized with MMD; data
//! generation is conditioned on a learned format embedding.

pub mod corpus;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod noise;
pub mod training;

pub use error::{Error, FormatError, Result};
pub use formats::{FormatId, StructuredRecord, Triple};
