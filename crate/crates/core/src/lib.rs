//! Noise-subspace feature cleaning for hyperspectral image classification.
//!
//! A pixel's spectrum is modeled as a class signature plus additive noise
//! drawn from a low-dimensional noise space. The classifier here learns
//! that space: a small 3-D CNN produces per-patch features, an affine map
//! extracts a noise estimate, the estimate is reconstructed in a bank of
//! learned base-noise vectors (cosine weights, rescaled to preserve the
//! estimate's energy), and the reconstruction is subtracted from the
//! features before classification. The base-noise bank is updated by its
//! own decayed gradient rule rather than by backpropagation; the rest of
//! the network trains against cross-entropy plus a center loss.
//!
//! Crate layout:
//! - [`tensor`]: dense f64 tensors, the autodiff tape, finite-difference checks
//! - [`noise_space`]: base-noise bank, reconstruction, self-supervised update
//! - [`model`]: backbone, denoise step, classifier head, training step
//! - [`data`]: synthetic scene generation, cube file format, patches, splits
//! - [`harness`]: metrics, training driver, map rendering, gradient suites, CLI

pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod noise_space;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
