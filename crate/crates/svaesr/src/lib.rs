//! Conditional soft-introspective VAE for continuous image super-resolution.
//!
//! One model serves every upsampling factor: a convolutional extractor turns
//! the low-resolution image into a latent code grid, and a local implicit
//! image function decodes RGB at arbitrary normalized coordinates, splitting
//! the positional encoding of each query into low- and high-frequency bands.
//! An attention encoder over pixel-coordinate tokens doubles as an
//! introspective discriminator trained on a soft-exponential ELBO objective.

pub mod autodiff;
pub mod encoder;
pub mod nn;
pub mod objectives;
pub mod liif;
pub mod coord;
pub mod error;
pub mod image;
pub mod metrics;
pub mod posenc;
pub mod resample;
pub mod rngstream;

pub use error::{Error, Result};
