//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Backward rules are built from the same primitives as the forward pass, so
//! a gradient returned with `retain_for_higher_order = true` is itself a
//! differentiable tensor. That is what lets losses defined on gradient-based
//! saliency maps be optimized.

mod backward;
pub mod catalog;
mod error;
mod gradcheck;
mod init;
mod ops;
pub mod snapshot;
mod tensor;

pub use backward::backward;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_with_floor, Order};
pub use init::Init;
pub use tensor::{is_grad_enabled, no_grad, Tensor};
