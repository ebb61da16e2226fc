//! Multi-exit CAM out-of-distribution detection.
//!
//! Pipeline: a small multi-exit CNN is trained on in-distribution images;
//! at detection time every exit's class activation map is softmax-selected
//! for the predicted class, confidence-weighted, aggregated to input
//! resolution, and used to mask the image. The mean-squared shift of the
//! penultimate embedding between original and masked image is the OOD
//! score (higher = more in-distribution).

pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::SplitMix64;
pub use tensor::{Tape, Tensor};
