//! Dense `f64` numerics for the ROI-aware convolutional autoencoder:
//! tensors, convolution kernels, a reverse-mode tape, Adam and seeded RNG.

pub mod adam;
pub mod error;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{NumericsError, Result};
pub use params::ParamSet;
pub use rng::{Rng, Stream};
pub use tape::{grad_global_norm, Gradients, Graph, ParamId, Var};
pub use tensor::Tensor;
