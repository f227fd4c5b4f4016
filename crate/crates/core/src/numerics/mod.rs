//! Dense tensors, reverse-mode autodiff, Adam with a warmup/decay schedule,
//! finite-difference gradient checking and the binary checkpoint container.

pub mod checkpoint;
mod gemm;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_store, GradCheckConfig};
pub use graph::{log_sum_exp, Gradients, Graph, OpKind, Var};
pub use optim::{adam_step, AdamState, OptimizerConfig, Schedule};
pub use params::{BoundParams, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
