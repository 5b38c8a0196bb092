//! Reverse-mode differentiation over dense `f64` matrices with selective
//! backpropagation and per-tensor FLOPs metering.
//!
//! A forward pass records a [`Tape`]. Each recorded operator names the slot
//! whose *activation-gradient bucket* pays for propagating gradient through
//! it; weight-gradient work is always charged to the parameter it produces.
//! [`backward_full`] runs everything, [`backward_selective`] runs only what a
//! [`SelectionMask`](crate::graph::SelectionMask) calls for.

mod backward;
mod checkpoint;
mod finite_diff;
mod tape;

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::graph::ModelGraph;
use crate::tensor::Matrix;

pub use backward::{backward_full, backward_selective};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use finite_diff::{central_difference, finite_diff_grad, FiniteDiffProbe, FD_STEP};
pub use tape::{NodeId, Tape};

/// Trainable tensors, indexed by slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub tensors: Vec<Matrix>,
}

impl ParamStore {
    /// Zero-initialized storage shaped after `graph`. One-dimensional tensors
    /// are stored as `1 x n` rows.
    pub fn zeros_like(graph: &ModelGraph) -> Self {
        let tensors = graph
            .tensors
            .iter()
            .map(|t| match t.shape.as_slice() {
                [n] => Matrix::zeros(1, *n),
                [r, c] => Matrix::zeros(*r, *c),
                other => Matrix::zeros(1, other.iter().product()),
            })
            .collect();
        ParamStore { tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }
}

impl Index<usize> for ParamStore {
    type Output = Matrix;
    fn index(&self, slot: usize) -> &Matrix {
        &self.tensors[slot]
    }
}

impl IndexMut<usize> for ParamStore {
    fn index_mut(&mut self, slot: usize) -> &mut Matrix {
        &mut self.tensors[slot]
    }
}

/// Per-slot parameter gradients; `None` where no gradient was computed.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(Vec<Option<Matrix>>);

impl Gradients {
    pub fn new(grads: Vec<Option<Matrix>>) -> Self {
        Gradients(grads)
    }

    pub fn get(&self, slot: usize) -> Option<&Matrix> {
        self.0[slot].as_ref()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn computed(&self) -> impl Iterator<Item = (usize, &Matrix)> {
        self.0.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}

/// Executed FLOPs of one forward/backward pair.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsMeter {
    pub fp_flops: u64,
    /// Activation-gradient FLOPs per slot bucket.
    pub dy: Vec<u64>,
    /// Weight-gradient FLOPs per slot.
    pub dw: Vec<u64>,
    /// Whether each slot's activation-gradient bucket executed (a bucket can
    /// run and still cost zero, e.g. bias pass-through).
    pub dy_ran: Vec<bool>,
}

impl FlopsMeter {
    pub fn new(slots: usize) -> Self {
        FlopsMeter {
            fp_flops: 0,
            dy: vec![0; slots],
            dw: vec![0; slots],
            dy_ran: vec![false; slots],
        }
    }

    pub fn backprop_total(&self) -> u64 {
        self.dy.iter().sum::<u64>() + self.dw.iter().sum::<u64>()
    }

    pub fn total(&self) -> u64 {
        self.fp_flops + self.backprop_total()
    }

    pub fn absorb(&mut self, other: &FlopsMeter) {
        self.fp_flops += other.fp_flops;
        for (a, b) in self.dy.iter_mut().zip(&other.dy) {
            *a += b;
        }
        for (a, b) in self.dw.iter_mut().zip(&other.dw) {
            *a += b;
        }
        for (a, b) in self.dy_ran.iter_mut().zip(&other.dy_ran) {
            *a |= b;
        }
    }
}
