//! Saccadic-vision classifier.
//!
//! A small trainable pipeline for fine-grained classification: a weight-shared
//! multi-stage encoder reads a downsampled peripheral view, part-sampling
//! attention turns its stage features into a spatial priority map, fixation
//! points are drawn from that map with Gaussian-penalty non-maximum
//! suppression, fixed-size patches are cropped from the high-resolution source
//! at those points and re-encoded by the same encoder, and the peripheral and
//! fixation class scores are fused under learned confidence weights.

pub mod backbone;
pub mod error;
pub mod fusion;
pub mod mpsa;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod saccade;

pub use error::{Error, Result};
