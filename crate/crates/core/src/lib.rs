//! Multi-scale lossy image codec.
//!
//! Pipeline: a convolutional analyzer maps an image to feature maps at M
//! resolutions; a deterministic quantizer turns them into integer levels; a
//! parallel coarse-to-fine conditional model drives a range coder to store
//! the levels losslessly; the synthesizer reconstructs the image from the
//! decoded levels. Training happens in two steps: the autoencoder minimizes
//! 1 - MS-SSIM, then the context models minimize cross-entropy against the
//! frozen autoencoder's quantized features.

pub mod autoencoder;
pub mod codec;
pub mod container;
pub mod context;
pub mod entropy;
pub mod error;
pub mod graph;
pub mod img;
pub mod lossless;
pub mod metrics;
pub mod model;
pub mod params;
pub mod quantizer;
pub mod report;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
