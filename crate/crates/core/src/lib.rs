//! View-dependent latent surrogate models for ensemble simulations.
//!
//! The pipeline resamples each simulation output along three axis-aligned
//! views, compresses every ray with a 1D convolutional autoencoder, learns a
//! 3D convolutional predictor from simulation parameters to the per-ray
//! latent codes, and fuses the three decoded views for rendering from any
//! viewpoint.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod ensemble;
pub mod io;
pub mod view;
pub(crate) mod nn;
pub mod rae;
pub mod predictor;
pub mod composite;
pub mod baselines;
pub mod render;
pub mod metrics;
pub mod pipeline;
pub mod service;
