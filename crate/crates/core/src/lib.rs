//! Undersampled MRI reconstruction with a latent diffusion prior.
//!
//! The crate is organised bottom-up:
//!
//! * [`kspace`]: centered orthonormal Fourier operators, masking, data consistency, coil combination.
//! * [`data`]: phantom and volume ingestion, mask generation, dataset caching.
//! * [`sketcher`]: the repair network and the data-consistent condition image.
//! * [`vae`]: the MR autoencoder and its three-term loss.
//! * [`generator`]: noise schedule and the frozen-base / trainable-control denoiser.
//! * [`sampler`]: the dual-stage (data consistency, then k-space guidance) DDIM variant.
//! * [`metrics`]: PSNR, SSIM and evaluation reports.
//! * [`pipeline`]: end-to-end reconstruction with ablation switches.

pub mod data;
pub mod error;
pub mod generator;
pub mod kspace;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rawio;
pub mod sampler;
pub mod sketcher;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
