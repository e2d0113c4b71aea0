//! Learned per-pixel parameter tuning for image restoration filters.
//!
//! The library turns a fixed-parameter image processor into a locally
//! adaptive one. Hand-crafted local features (variance, entropy, gradient
//! statistics) are mapped through a bounded quadratic-logistic model to a
//! per-pixel field of processor parameters, and the model coefficients are
//! fitted with a derivative-free simplex search that maximizes an image
//! quality score (PSNR, SSIM or MS-SSIM) against clean references.
//!
//! Three processors ship with the crate:
//!
//! * [`anlm`]: approximate non-local means denoising with per-pixel patch
//!   size and filtering strength,
//! * [`demosaic`]: a mixture of Bayer demosaicers blended per pixel,
//! * [`tv`]: TV-regularized Poisson deblurring with a per-pixel
//!   regularization weight.
//!
//! [`trainer`] wires the pieces together: it degrades reference images,
//! extracts features, and runs the global-then-adaptive fitting protocol.

pub mod anlm;
pub mod demosaic;
pub mod error;
pub mod features;
pub mod io;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod raster;
pub mod simplex;
pub mod trainer;
pub mod tv;

pub use error::{Error, Result};
pub use raster::{BayerMosaic, BlurKernel, CfaLayout, RasterImage};
