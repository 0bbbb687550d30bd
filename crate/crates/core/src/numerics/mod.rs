//! Dense f32 tensors, a recorded autodiff graph, finite-difference checks,
//! and the "FCF1" checkpoint container.

pub mod checkpoint;
pub mod gemm;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckFailure, GradCheckReport};
pub use graph::{BatchStats, Gradients, Graph, Var, BN_EPS, LN_EPS};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

