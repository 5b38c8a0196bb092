//! Selective backpropagation under a FLOPs budget.
//!
//! The crate profiles the backprop cost of every trainable tensor of a model,
//! scores each tensor by how much its next update would lower the loss, and
//! picks, by dynamic programming, the set of tensors to train so that the
//! per-batch training cost stays below a fraction `rho` of full fine-tuning.
//!
//! The pieces, in pipeline order:
//!
//! * [`graph`]: tensors in backprop order and the selection-mask algebra;
//! * [`autodiff`]: a small tape-based reverse-mode engine that meters FLOPs and
//!   can run backprop for a subset of tensors;
//! * [`model`] and [`synth`]: a toy decoder-only transformer and synthetic tasks;
//! * [`profiler`]: closed-form per-tensor FLOPs;
//! * [`importance`]: first-order update importance;
//! * [`selector`]: the budgeted DP and a brute-force oracle;
//! * [`trainer`]: the epoch loop and its baselines.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod graph;
pub mod importance;
pub mod model;
pub mod optimizer;
pub mod profiler;
pub mod selector;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/graph.md")]
    mod graph {}
    #[doc = include_str!("../../../book/src/profiling.md")]
    mod profiling {}
    #[doc = include_str!("../../../book/src/importance.md")]
    mod importance {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
