//! GRU-AUNet: a GRU-gated attention UNet for fingerprint presentation attack
//! detection, with a from-scratch differentiable graph, gradient-level
//! verification, training on synthetic data, and ISO-style PAD metrics
//! (APCER / BPCER / ACER, DET curves, k-fold and cross-dataset protocols).

pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod decoder;
pub mod dfn;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod graph;
pub mod optim;
pub mod params;
pub mod swin;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Activation, Graph, Var};
pub use tensor::{Scalar, Tensor};
