//! Minimal reverse-mode differentiable tensor engine.
//!
//! A [`Graph`] records every op of one forward pass. Values are `f64` and
//! row-major. After building a scalar loss, [`Graph::backward`] sweeps the tape
//! in reverse and accumulates gradients into every node that requires one.
//!
//! The op set is deliberately small: matmul, add, mul, scale, pow, transpose,
//! reshape, concat, slice, softmax, layer norm, GELU, embedding lookup,
//! cross-entropy and sum/mean reductions. Everything else is composed.

pub mod error;
pub mod fault;
pub mod gradcheck;
mod graph;
pub mod io;
pub mod opsuite;
mod kernels;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_many, grad_check_params, GradCheckReport, ParamGradReport};
pub use graph::{Graph, OpKind, Var};
pub use kernels::softmax_rows;
pub use params::{ParamStore, ParamVars};
pub use tensor::Tensor;
