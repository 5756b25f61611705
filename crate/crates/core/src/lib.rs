//! Learned image compression with sparse binary latent codes.
//!
//! The crate contains a small reverse-mode autodiff engine ([`tensor`]), the
//! convolutional autoencoder ([`model`]), the training objectives
//! ([`losses`]), the optimizer and training loops ([`trainer`]), and the
//! lossless latent coder plus bitstream container ([`codec`]).

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod error;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
