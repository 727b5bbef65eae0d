//! Region-of-interest aware convolutional autoencoder for small-structure
//! ultrasound-like images, with multi-site synthetic data, two-phase training,
//! gradient-norm loss calibration and latent-space probes.

pub mod error;
pub mod harness;
pub mod image;
pub mod plot;
pub mod preprocess;
pub mod probes;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{CoreError, Result};
pub use image::GrayImage;
pub use preprocess::{Canvas, LetterboxTransform, RoiBox};
