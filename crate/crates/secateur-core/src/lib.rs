//! Task-aware structured pruning of a toy transformer, with transfer
//! learning across a target and an auxiliary task.
//!
//! The crate is `no_std + alloc`: it holds the numeric substrate (tensors,
//! reverse-mode autodiff, optimizers), the hard-concrete gate machinery, the
//! gated transformer, the sparsity controller, mask coupling strategies, and
//! the prune/finetune pipeline. Everything that touches the filesystem, the
//! clock or a terminal lives in the companion `secateur` crate.

#![no_std]

extern crate alloc;

pub mod compact;
pub mod coupling;
pub mod data;
pub mod error;
pub mod metrics;
pub mod sparsity;
pub mod model;
pub mod gates;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod rngutil;
pub mod tensor;

pub use error::CoreError;
pub use tensor::Tensor;
