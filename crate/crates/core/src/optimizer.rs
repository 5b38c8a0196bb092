//! SGD and AdamW with per-tensor state, applied only to selected tensors.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::graph::SelectionMask;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW only).
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("optimizer.beta1", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer.beta2", "must be in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Per-tensor moments and step counters. A tensor's state only advances
/// when the tensor is updated.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    steps: Vec<u64>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = params.tensors.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
        Optimizer {
            config,
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; params.len()],
        }
    }

    pub fn steps(&self, slot: usize) -> u64 {
        self.steps[slot]
    }

    pub fn moments(&self, slot: usize) -> (&Matrix, &Matrix) {
        (&self.m[slot], &self.v[slot])
    }

    /// The update tensor `slot` would receive for gradient `g`, and the
    /// moments it would leave behind.
    fn proposal(&self, slot: usize, w: &Matrix, g: &Matrix) -> (Matrix, Option<(Matrix, Matrix)>) {
        let c = &self.config;
        match c.kind {
            OptimizerKind::Sgd => {
                let mut dw = g.clone();
                dw.scale(-c.lr);
                (dw, None)
            }
            OptimizerKind::AdamW => {
                let t = self.steps[slot] + 1;
                let bc1 = 1.0 - c.beta1.powf(t as f64);
                let bc2 = 1.0 - c.beta2.powf(t as f64);
                let mut m = self.m[slot].clone();
                let mut v = self.v[slot].clone();
                let mut dw = Matrix::zeros(g.rows, g.cols);
                for i in 0..g.len() {
                    let gi = g.data[i];
                    m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                    v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                    let mh = m.data[i] / bc1;
                    let vh = v.data[i] / bc2;
                    dw.data[i] = -c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * w.data[i]);
                }
                (dw, Some((m, v)))
            }
        }
    }

    /// Updates for every tensor that has a gradient, without touching the
    /// weights or the optimizer state.
    pub fn hypothetical_update(&self, params: &ParamStore, grads: &Gradients) -> Vec<Option<Matrix>> {
        (0..params.len())
            .map(|slot| grads.get(slot).map(|g| self.proposal(slot, &params[slot], g).0))
            .collect()
    }

    /// Applies the update to the tensors in `mask`. Every selected tensor must
    /// have a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, mask: &SelectionMask) {
        for slot in mask.selected() {
            let g = grads
                .get(slot)
                .unwrap_or_else(|| panic!("no gradient for selected slot {slot}"));
            let (dw, state) = self.proposal(slot, &params[slot], g);
            params[slot].add_assign(&dw);
            if let Some((m, v)) = state {
                self.m[slot] = m;
                self.v[slot] = v;
            }
            self.steps[slot] += 1;
        }
    }
}
