//! Numerical laboratory for the stability of recurrent convolutional video
//! models: a small tensor/autodiff engine, layer spectra, stable-rank
//! normalization, a recurrent model zoo, and the diagnostics that probe it.

pub mod adam;
pub mod archive;
pub mod autodiff;
pub mod conv;
pub mod dataio;
pub mod diagnostics;
pub mod error;
pub mod models;
pub mod normalization;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Kernel, Padding, Tensor};
