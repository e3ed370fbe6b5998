//! Zero-shot inverse tone mapping for SDR video.
//!
//! A small UNet is trained on a single video to predict multiplicative
//! residuals between exposures two stops apart. Chaining those predictions
//! yields a bracketed exposure stack per frame, which is fused into linear
//! HDR radiance. PU-encoded PSNR and SSIM score the result against a
//! reference.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod exposure;
pub mod fixture;
pub mod fusion;
pub mod image;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod tensor;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
pub use exposure::{HdrFrame, SdrFrame};
pub use image::Image;
pub use tensor::Tensor;
