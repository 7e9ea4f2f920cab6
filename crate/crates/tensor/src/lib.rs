//! Minimal reverse-mode automatic differentiation over NCHW tensors.
//!
//! The engine is generic over [`Real`] so the same network code runs in
//! `f32` for training and in `f64` for finite-difference gradient checks.
//! Everything is single threaded and evaluation order is fixed, so results
//! are bit-reproducible on one platform.

mod broadcast;
pub mod conv;
pub mod gradcheck;
mod graph;
mod norm;
mod optim;
mod params;
mod real;
pub mod sample;
mod tensor;

pub use broadcast::BinOp;
pub use graph::{broadcast_result_shape, BatchStats, Grads, Graph, Var};
pub use optim::{clip_grad_norm, grad_norm, Adam};
pub use params::{ParamId, ParamStore};
pub use real::{gemm, Real};
pub use tensor::{numel, Tensor};
