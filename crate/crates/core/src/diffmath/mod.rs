//! Dense arrays with reverse-mode differentiation, the numeric substrate
//! for every trainable component.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Attrs, Gradients, Graph, OpId, Var};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use params::{GradBuffer, ParamId, ParamStore};
pub use tensor::{DType, Scalar, Tensor};

#[cfg(test)]
mod tests;
