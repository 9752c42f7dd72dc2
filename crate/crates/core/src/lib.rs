//! Residual-learning GAN that predicts the adversarial cloak in a perturbed
//! image so it can be subtracted out, built on Fast Fourier Convolutions.

pub mod activation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod dataset;
pub mod error;
pub mod fft;
pub mod ffc;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

#[cfg(test)]
mod testing;

pub use activation::{pointwise, Activation};
pub use autograd::{GradTape, Gradients, Var};
pub use conv::{conv2d, Padding};
pub use error::{GleanError, Result};
pub use ffc::FfcConfig;
pub use fft::{irfft2, rfft2, HalfSpectrum};
pub use graph::{Eager, Graph};
pub use model::{clean, DiscriminatorConfig, GeneratorConfig, GleanModel};
pub use params::ParamStore;
pub use tensor::Tensor;
