//! Weakly supervised semantic segmentation from image-level labels.
//!
//! A small convolutional network emits one score plane per class. During
//! training the planes are collapsed to image-level scores by an aggregation
//! layer (sum, max, or log-sum-exp) and fit with a softmax log-likelihood
//! against the image label only. At inference the aggregation is dropped,
//! full-resolution score maps are recovered by shift-and-stitch, and the
//! per-pixel posteriors are refined with an image-level prior and one of
//! three smoothing priors.

pub mod aggregation;
pub mod densepriors;
pub mod error;
pub mod evalmetrics;
pub mod gradcheck;
pub mod inference;
pub mod layers;
mod linalg;
pub mod mask;
pub mod optim;
pub mod pnm;
pub mod rng;
pub mod segnet;
pub mod synthgen;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
