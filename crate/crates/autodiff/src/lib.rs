//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Build a fresh [`Graph`] per forward pass, bind parameters from a
//! [`ParamStore`], call [`Graph::backward`] on a scalar, then fold the
//! result into the store with [`ParamStore::accumulate`] and update with
//! [`Adam`].

mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod init;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use checkpoint::ParamMap;
pub use error::{AutodiffError, Result};
pub use graph::{Gradients, Graph, Segments, Var, COSINE_EPS, LAYER_NORM_EPS};
pub use optim::{clip_grad_norm, Adam};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
