//! Resource-model laboratory: sparsity-regularized SiLU networks trained on
//! composite regression tasks, neuron-allocation measurements, and the
//! analytic scaling predictions they are checked against.
//!
//! - [`netcore`]: network parameters, forward passes, traces, gradients
//! - [`trainer`]: regularized objective, Adam, step-decay schedule, training loop
//! - [`tasks`]: target functions, samplers, task losses
//! - [`allocometer`]: allocated-neuron detection, attribution, redundancy, pairing
//! - [`resource_model`]: power-law fits, allocation optimum, loss predictors

// Validation is written as `!(x > 0.0)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocometer;
pub mod error;
pub mod netcore;
pub mod resource_model;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
pub use netcore::{NetworkParams, NetworkShape};
pub use tasks::{TaskKind, TaskSpec};
pub use trainer::{TrainConfig, TrainRecord};
