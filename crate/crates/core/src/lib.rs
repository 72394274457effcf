//! Desk-scale denoising diffusion models.
//!
//! The crate covers the full pipeline for small vector and image data:
//! noise schedules, closed-form Gaussian identities, the forward noising
//! process, an MLP noise predictor with time, class and token conditioning,
//! training with the simple and hybrid objectives, the DDPM / strided
//! learned-variance / DDIM / classifier-free guided samplers, and the
//! IS / FID / PSNR / SSIM evaluation metrics.

// Range checks are written as negated comparisons so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod numerics;
pub mod schedule;
pub mod gaussian;
pub mod forward;
pub mod data;
pub mod denoiser;
pub mod training;
pub mod metrics;
pub mod sampler;
mod io;

pub use io::format_f64;
