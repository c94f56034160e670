//! A small reverse-mode automatic differentiation engine over dense `f64`
//! tensors, sized for image models at a few thousand pixels.
//!
//! Backward rules are recorded as ordinary tensor ops, so a gradient taken
//! with `create_graph = true` is itself differentiable. That is what bi-level
//! (second-order) meta-learning needs: the adapted parameters
//! `theta' = theta - alpha * grad(L)` stay connected to `theta`.
//!
//! Tensors are single-threaded (`Rc`); move plain `Vec<f64>` buffers between
//! threads instead.

mod backward;
pub mod fd;
pub mod kernels;
pub mod layers;
mod op;
mod ops;
mod tensor;

pub use backward::grad;
pub use kernels::{ConvGeom, GatherIndex};
pub use tensor::{no_grad, NoGradGuard, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("gradient requested of a non-scalar output with shape {0:?}")]
    NonScalarOutput(Vec<usize>),
}
