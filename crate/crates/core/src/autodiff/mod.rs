//! A small reverse-mode automatic differentiation engine over `ndarray`.
//!
//! Every forward pass in this crate — training or inference — is expressed as
//! a [`Graph`] of tensor operations. Training calls [`Fwd::grads`] to run the
//! backward sweep; inference simply drops the graph. The engine is generic
//! over the scalar type so that the same operation implementations can be
//! exercised at `f64` precision by the finite-difference gradient checks while
//! production training runs at `f32`.

mod context;
mod graph;
mod optim;
mod params;
mod scalar;

pub use context::Fwd;
pub use graph::{Graph, Tx};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use params::{fingerprint, Gradients, ParamStore};
pub use scalar::Real;
