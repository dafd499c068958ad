//! Cross-domain cell counting with disentangled transfer learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: reverse-mode autodiff engine (conv2d, pooling, dense, ...).
//! - [`density`]: dot annotations to density maps, counting, MAE.
//! - [`model`]: the dual-decoder counter network and its loss.
//! - [`synthesis`]: few-shot target image synthesis (patches, inpainting,
//!   patch GAN, augmentation, compositing).
//! - [`transfer`]: progressive transfer learning and its ablations.
//! - [`datasets`]: procedural domains, dataset directories, checkpoints.
//! - [`config`] / [`cli`]: the experiment harness behind `dtl-count`.

pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod datasets;
pub mod density;
pub mod error;
pub mod image;
pub mod model;
pub mod rng;
pub mod synthesis;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
