//! Minimal dense tensors with reverse-mode automatic differentiation and the
//! layer set used by the ray autoencoder and the latent predictor.

pub mod adam;
pub mod checkpoint;
mod dense;
pub mod graph;
pub(crate) mod kernels;
pub mod params;
pub mod spectral;

pub use adam::{cosine_lr, AdamConfig, AdamState};
pub use dense::Tensor;
pub use graph::{Grads, Graph, Var};
pub use params::{kaiming_uniform, Bound, ParamId, ParamStore};
pub use spectral::PowerIteration;
