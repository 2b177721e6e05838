//! Continual semantic segmentation under joint class- and domain-incremental
//! shift, with exemplar-free replay of past-domain appearance through
//! averaged Fourier amplitude windows.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense tensors and the 2-D FFT.
//! * [`style`]: domain style extraction, the style bank and stylization.
//! * [`data`]: procedural street scenes, label masking and on-disk datasets.
//! * [`model`]: a three-layer convolutional segmenter with manual gradients.
//! * [`continual`]: channel grouping, the four objectives, pseudo-labels and
//!   the incremental training protocol.
//! * [`eval`]: mIoU, oracle gaps, generalization score and reports.
//! * [`config`] and [`commands`]: experiment configuration and the CLI verbs.

pub mod binio;
pub mod commands;
pub mod config;
pub mod continual;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod style;

pub use error::{Error, Result};

/// Label id of the unknown class `u`.
pub const UNKNOWN: ClassId = 0;
/// Label id excluded from every loss and metric.
pub const IGNORE: ClassId = 255;

/// Semantic class identifier as stored in label maps.
pub type ClassId = u8;
