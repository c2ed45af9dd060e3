//! Robust augmented VAE workbench.
//!
//! The crate implements a variational bound over augmented data pairs whose
//! latent prior couples the two codes through a Gaussian augmentation kernel,
//! the Gaussian closed forms it relies on together with independent numerical
//! oracles, MLP encoders/decoders on a small reverse-mode autodiff tape,
//! RAdam training, PGD latent-space attacks and linear-probe evaluation.

pub mod bound;
#[cfg(feature = "cli")]
pub mod cli;
pub mod dataset;
pub mod error;
pub mod gaussian;
pub mod model;
pub mod oracle;
pub mod report;
pub mod robustness;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
