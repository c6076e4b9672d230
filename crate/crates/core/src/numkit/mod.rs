//! Minimal differentiable numeric core: dense `f64` tensors, the primitive
//! operations the model needs, reverse-mode gradients and a
//! finite-difference checker.

pub mod fault;
pub mod gradcheck;
mod param;
pub mod suite;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use param::{Gradients, Param, ParamId, ParamSet};
pub use tape::{Activation, Tape, Var};
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;
