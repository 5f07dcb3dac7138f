//! A small dense tensor engine: row-major `f64` tensors, tape-based
//! reverse-mode autodiff, the transformer building blocks, AdamW, and a
//! finite-difference gradient checker.
//!
//! Forward and backward passes of one [`Graph`] are single-threaded and run
//! their loops in a fixed order, so identical inputs give bit-identical
//! results. Separate graphs share nothing mutable and can be evaluated
//! concurrently.

mod error;
mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
pub mod ops;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_ladder, rel_err, GradCheckReport, ParamCheck};
pub use graph::{Graph, Var};
pub use optim::{AdamW, AdamWState};
pub use params::{Grads, Param, ParamId, ParamStore};
pub use tensor::Tensor;
