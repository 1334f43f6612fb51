//! Low-dose CT denoising with language-guided quantized features and
//! efficient two-dimensional state-space scans.
//!
//! The crate is self-contained: [`tensor`] provides the dense tensor and tape,
//! [`ssm`] and [`scan2d`] the scan kernels, [`vq`] the frozen-codebook pyramid
//! quantizer, [`langae`] the autoencoder, [`seed`] the denoiser and its
//! alignment loss, [`data`] the synthetic phantoms and [`metrics`] PSNR/SSIM.

mod binio;
pub mod config;
pub mod data;
pub mod error;
pub mod langae;
pub mod metrics;
pub mod nn;
pub mod scan2d;
pub mod seed;
pub mod ssm;
pub mod tensor;
pub mod vq;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
