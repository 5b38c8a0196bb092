//! First-order tensor importance: how much the next update of each tensor
//! would lower the loss, `I_k = -Σ Δw·∂L/∂w` over the tensor's elements.

use serde::{Deserialize, Serialize};

use crate::autodiff::{backward_selective, FlopsMeter, Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{DyConvention, ModelGraph, SelectionMask};
use crate::model::{forward, Batch};
use crate::optimizer::Optimizer;
use crate::profiler::FlopsProfile;
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    /// Normalized importance per slot; 0 where unevaluated.
    pub values: Vec<f64>,
    /// Importance before scaling.
    pub raw: Vec<f64>,
    pub evaluated: Vec<bool>,
    /// Number of leading slots covered by the evaluation backward pass.
    pub evaluated_depth: usize,
    /// Divisor applied to `raw`.
    pub scale: f64,
    /// Every evaluated entry was zero.
    pub degenerate: bool,
}

impl ImportanceVector {
    /// A fully evaluated vector from raw values.
    pub fn from_raw(raw: Vec<f64>) -> Self {
        let evaluated = vec![true; raw.len()];
        Self::with_evaluated(raw, evaluated)
    }

    pub fn with_evaluated(raw: Vec<f64>, evaluated: Vec<bool>) -> Self {
        assert_eq!(raw.len(), evaluated.len());
        let (values, scale, degenerate) = normalize(&raw, &evaluated);
        let evaluated_depth = evaluated.iter().rposition(|&e| e).map_or(0, |i| i + 1);
        ImportanceVector {
            values,
            raw,
            evaluated,
            evaluated_depth,
            scale,
            degenerate,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Divides evaluated entries by their maximum magnitude. Returns the scaled
/// values, the divisor and whether everything was zero.
pub fn normalize(raw: &[f64], evaluated: &[bool]) -> (Vec<f64>, f64, bool) {
    let max = raw
        .iter()
        .zip(evaluated)
        .filter(|(_, &e)| e)
        .map(|(v, _)| v.abs())
        .fold(0.0, f64::max);
    if max == 0.0 {
        return (vec![0.0; raw.len()], 1.0, true);
    }
    let values = raw
        .iter()
        .zip(evaluated)
        .map(|(&v, &e)| if e { v / max } else { 0.0 })
        .collect();
    (values, max, false)
}

/// Raw `-Σ Δw·g` for each slot with both an update and a gradient.
pub fn tensor_importance(graph: &ModelGraph, deltas: &[Option<Matrix>], grads: &Gradients) -> Result<ImportanceVector> {
    let n = graph.len();
    let mut raw = vec![0.0; n];
    let mut evaluated = vec![false; n];
    for slot in 0..n {
        if let (Some(dw), Some(g)) = (&deltas[slot], grads.get(slot)) {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    tensor: graph.tensors[slot].name.clone(),
                });
            }
            let v = -dot(&dw.data, &g.data);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    tensor: graph.tensors[slot].name.clone(),
                });
            }
            raw[slot] = v;
            evaluated[slot] = true;
        }
    }
    Ok(ImportanceVector::with_evaluated(raw, evaluated))
}

/// Number of leading slots worth evaluating under budget `rho`: the smallest
/// `k` whose cumulative `t_dy` reaches `rho * T_full`, or all of them. A
/// tensor deeper than that cannot be selected within the budget.
pub fn early_stop_depth(profile: &FlopsProfile, rho: f64) -> Result<usize> {
    check_rho(rho)?;
    let budget = rho * profile.t_full as f64;
    let mut acc = 0u64;
    for (i, &t) in profile.t_dy.iter().enumerate() {
        acc += t;
        if acc as f64 >= budget {
            return Ok(i + 1);
        }
    }
    Ok(profile.len())
}

pub(crate) fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::config("rho", format!("{rho} is outside (0, 1]")));
    }
    Ok(())
}

/// Slots whose gradient an evaluation to `depth` computes. The tied tensor
/// needs a full-depth pass, so it is only included when `depth` covers the
/// whole graph.
pub fn evaluation_mask(graph: &ModelGraph, depth: usize) -> SelectionMask {
    let n = graph.len();
    let mut mask = SelectionMask::prefix(n, depth.min(n));
    if depth < n {
        for s in graph.tied_slots() {
            mask.set(s, false);
        }
    }
    mask
}

/// One evaluation event: forward and backward to `depth` on `batch`, the
/// optimizer's hypothetical update, and the resulting importance. Returns
/// the metered cost of the evaluation pass as well.
pub fn evaluate_importance(
    graph: &ModelGraph,
    params: &ParamStore,
    batch: &Batch,
    optimizer: &Optimizer,
    depth: usize,
) -> Result<(ImportanceVector, FlopsMeter)> {
    let tape = forward(graph, params, batch)?;
    if !tape.loss().is_finite() {
        return Err(Error::NonFinite { tensor: "loss".into() });
    }
    let mask = evaluation_mask(graph, depth);
    let (grads, meter) = backward_selective(&tape, graph, &mask, DyConvention::Inclusive);
    let deltas = optimizer.hypothetical_update(params, &grads);
    let mut iv = tensor_importance(graph, &deltas, &grads)?;
    iv.evaluated_depth = depth.min(graph.len());
    Ok((iv, meter))
}

/// Loss increase from reverting tensor `slot`'s share of a scaled update:
/// `L(w + εΔw − εΔw_slot) − L(w + εΔw)`. Test oracle for the first-order
/// estimate, which predicts `ε · I_slot`.
pub fn undo_oracle(
    graph: &ModelGraph,
    params: &ParamStore,
    batch: &Batch,
    deltas: &[Option<Matrix>],
    scale: f64,
    slot: usize,
) -> Result<f64> {
    let mut updated = params.clone();
    for (s, dw) in deltas.iter().enumerate() {
        if let Some(dw) = dw {
            for (w, &d) in updated[s].data.iter_mut().zip(&dw.data) {
                *w += scale * d;
            }
        }
    }
    let with_all = forward(graph, &updated, batch)?.loss();
    updated[slot] = params[slot].clone();
    let without = forward(graph, &updated, batch)?.loss();
    Ok(without - with_all)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::graph::ModelDims;
    use crate::profiler::BatchShape;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let (v, s, deg) = normalize(&[3.0, -6.0, 1.5], &[true; 3]);
        assert_eq!(v, vec![0.5, -1.0, 0.25]);
        assert_eq!(s, 6.0);
        assert!(!deg);
        let (v, _, deg) = normalize(&[0.0, 0.0], &[true; 2]);
        assert_eq!(v, vec![0.0, 0.0]);
        assert!(deg);
        let (v, _, _) = normalize(&[1e30, 1.0], &[true; 2]);
        assert_eq!(v[0], 1.0);
        assert!((v[1] - 1e-30).abs() < 1e-45);
    }

    #[test]
    fn unevaluated_entries_do_not_set_the_scale() {
        let iv = ImportanceVector::with_evaluated(vec![2.0, 100.0, 1.0], vec![true, false, true]);
        assert_eq!(iv.values, vec![1.0, 0.0, 0.5]);
        assert_eq!(iv.evaluated_depth, 3);
    }

    #[test]
    fn sgd_importance_is_scaled_squared_norm() {
        let graph = ModelGraph::dense_chain(&[1, 2, 1]).unwrap();
        // slot 0: 2x1 (g = (1, 0)), slot 1: 1x2 (g = (0, 2))
        let grads = Gradients::new(vec![
            Some(Matrix::from_vec(2, 1, vec![1.0, 0.0])),
            Some(Matrix::from_vec(1, 2, vec![0.0, 2.0])),
        ]);
        let params = ParamStore {
            tensors: vec![Matrix::zeros(2, 1), Matrix::zeros(1, 2)],
        };
        let opt = Optimizer::new(crate::optimizer::OptimizerConfig::sgd(1.0), &params);
        let deltas = opt.hypothetical_update(&params, &grads);
        let iv = tensor_importance(&graph, &deltas, &grads).unwrap();
        assert_eq!(iv.raw, vec![1.0, 4.0]);
        assert_eq!(iv.values, vec![0.25, 1.0]);
    }

    #[test]
    fn zero_update_gives_zero_importance() {
        let graph = ModelGraph::dense_chain(&[1, 1]).unwrap();
        let grads = Gradients::new(vec![Some(Matrix::filled(1, 1, 3.0))]);
        let iv = tensor_importance(&graph, &[Some(Matrix::zeros(1, 1))], &grads).unwrap();
        assert_eq!(iv.raw, vec![0.0]);
        assert!(iv.degenerate);
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let graph = ModelGraph::dense_chain(&[1, 1]).unwrap();
        let grads = Gradients::new(vec![Some(Matrix::filled(1, 1, f64::NAN))]);
        match tensor_importance(&graph, &[Some(Matrix::zeros(1, 1))], &grads) {
            Err(Error::NonFinite { tensor }) => assert_eq!(tensor, "layer1"),
            other => panic!("{other:?}"),
        }
    }

    fn uniform_profile(n: usize, u: u64, t_fp: u64) -> FlopsProfile {
        FlopsProfile::new(BatchShape { batch: 1, seq: 1 }, vec![u; n], vec![0; n], t_fp, vec![]).unwrap()
    }

    #[test]
    fn early_stop_examples() {
        // T_full = 10u, rho = 0.35 -> budget 3.5u
        let p = uniform_profile(10, 100, 0);
        assert_eq!(early_stop_depth(&p, 0.35).unwrap(), 4);
        assert_eq!(early_stop_depth(&p, 1.0).unwrap(), 10);
        assert_eq!(early_stop_depth(&p, 0.01).unwrap(), 1);
        assert!(early_stop_depth(&p, 0.0).is_err());
        assert!(early_stop_depth(&p, 1.5).is_err());
    }

    #[test]
    fn evaluation_mask_drops_tied_tensor_unless_full_depth() {
        let dims = ModelDims {
            n: 4,
            d: 4,
            h: 1,
            ffn: 4,
            vocab: 5,
            blocks: 1,
        };
        let graph = build_graph(dims).unwrap();
        let m = evaluation_mask(&graph, 5);
        assert!(!m.get(0));
        assert_eq!(m.count(), 4);
        assert_eq!(evaluation_mask(&graph, graph.len()).count(), graph.len());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn normalization_preserves_order(raw in proptest::collection::vec(-1e6f64..1e6, 1..20)) {
            let (v, _, _) = normalize(&raw, &vec![true; raw.len()]);
            for i in 0..raw.len() {
                for j in 0..raw.len() {
                    if raw[i] < raw[j] {
                        prop_assert!(v[i] <= v[j]);
                    }
                }
            }
            let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            prop_assert!(max == 0.0 || (max - 1.0).abs() < 1e-12);
        }

        #[test]
        fn early_stop_excludes_only_unaffordable_tensors(
            dy in proptest::collection::vec(0u64..100, 1..12),
            dw in proptest::collection::vec(0u64..100, 12),
            t_fp in 1u64..50,
            rho in 0.05f64..1.0,
        ) {
            let n = dy.len();
            let p = FlopsProfile::new(BatchShape { batch: 1, seq: 1 }, dy, dw[..n].to_vec(), t_fp, vec![]).unwrap();
            let k = early_stop_depth(&p, rho).unwrap();
            for slot in k..n {
                let m = SelectionMask::from_slots(n, [slot]);
                let cost = crate::profiler::selective_cost(&p, &m, DyConvention::Inclusive);
                prop_assert!(cost as f64 > rho * p.t_full as f64);
            }
        }
    }
}
