//! Minimal tensor arithmetic with reverse-mode differentiation.
//!
//! A [`Graph`] records a closed set of operations (convolution, activations,
//! bilinear resampling, alpha compositing, elementwise arithmetic and a few
//! reductions). Node ids are handed out in creation order, so
//! [`Graph::backward`] is a single reverse sweep that visits each node once.
//!
//! Training runs in `f32`; [`grad_check`] works in `f64`, where central
//! differences are accurate enough to validate every op.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheck, GRAD_CHECK_FLOOR};
pub use graph::{sigmoid, softplus, Activation, Graph, NodeId, LEAKY_SLOPE};
pub use kernels::SampleGeometry;
pub use tensor::{Real, Tensor};
