//! Budgeted tensor selection by dynamic programming, with a brute-force oracle.
//!
//! The DP works on a quantized profile: every cost is scaled by
//! `Z = T_q / T_full` and floored, and the budget axis holds only backprop
//! FLOPs (`rho * T_full - T_fp`), since the forward cost does not depend on
//! the mask.
//!
//! A state `S[k][t]` is the best cumulative importance of a plan whose deepest
//! selected tensor is `k` and whose quantized cost is at most `t`. Selecting
//! `k` below a shallower plan topped by `k_c` costs
//! `Δ = q_dw[k] + Σ q_dy[j]` over the slots newly brought onto the gradient
//! path, so `S[k][t] = I_k + max(0, max_{k_c < k} S[k_c][t − Δ])`.
//! The fallback index is `S[k_c]`, the state whose top candidate is `k_c`;
//! the formulation this follows writes it as `P[k − k_c, ·]`, which does not
//! match its own backtrace description.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DyConvention, ModelGraph, SelectionMask};
use crate::importance::{check_rho, ImportanceVector};
use crate::profiler::FlopsProfile;

/// Brute force refuses candidate sets larger than this.
pub const BRUTE_FORCE_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedProfile {
    pub q_dy: Vec<u64>,
    pub q_dw: Vec<u64>,
    pub z: f64,
    pub t_q: u64,
}

/// Scales and floors every cost: `q = ⌊t · T_q / T_full⌋`.
pub fn quantize(profile: &FlopsProfile, t_q: u64) -> Result<QuantizedProfile> {
    if t_q == 0 {
        return Err(Error::config("t_q", "resolution must be at least 1"));
    }
    let z = t_q as f64 / profile.t_full as f64;
    let q = |t: u64| scale_floor(t, t_q, profile.t_full);
    Ok(QuantizedProfile {
        q_dy: profile.t_dy.iter().map(|&t| q(t)).collect(),
        q_dw: profile.t_dw.iter().map(|&t| q(t)).collect(),
        z,
        t_q,
    })
}

/// `⌊value · num / den⌋` without floating-point rounding.
fn scale_floor(value: u64, num: u64, den: u64) -> u64 {
    (value as u128 * num as u128 / den as u128) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectOptions {
    pub convention: DyConvention,
    /// Skip subproblems that cannot hold a plan.
    pub prune: bool,
}

impl Default for SelectOptions {
    fn default() -> Self {
        SelectOptions {
            convention: DyConvention::Inclusive,
            prune: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub mask: SelectionMask,
    /// Backprop plus forward cost at full resolution.
    pub predicted_flops: u64,
    /// Σ of normalized importance over the selected tensors.
    pub cumulative_importance: f64,
    /// The first DP pass's optimum, before any re-solve or repair.
    pub dp_importance: f64,
    /// DP passes re-run with a tightened budget.
    pub resolves: usize,
    /// Tensors dropped to restore the unquantized budget.
    pub repaired: Vec<usize>,
    pub subproblems_solved: u64,
    pub feasible: bool,
    /// Wall time of the DP, in seconds.
    pub seconds: f64,
}

impl SelectionPlan {
    pub fn reduction(&self, profile: &FlopsProfile) -> f64 {
        1.0 - self.predicted_flops as f64 / profile.t_full as f64
    }
}

/// Σ of `values` over the selected slots, summed in slot order.
pub fn cumulative_importance(importance: &ImportanceVector, mask: &SelectionMask) -> f64 {
    mask.selected().map(|s| importance.values[s]).sum()
}

fn backprop_budget(profile: &FlopsProfile, rho: f64) -> Result<f64> {
    check_rho(rho)?;
    let budget = rho * profile.t_full as f64;
    if budget < profile.t_fp as f64 {
        return Err(Error::InfeasibleBudget {
            budget,
            forward: profile.t_fp,
        });
    }
    Ok(budget - profile.t_fp as f64)
}

#[derive(Clone, Copy)]
struct State {
    value: f64,
    count: u32,
    cost: u64,
    /// `(k_c, t')` this state extends, or `None` if `k` is the only tensor.
    parent: Option<(usize, u64)>,
}

/// `(value, tensors, cost)`: higher value wins, then more tensors with
/// positive importance, then lower cost.
type Key = (f64, u32, u64);

fn positive(v: f64) -> u32 {
    u32::from(v > 0.0)
}

fn better(a: Key, b: Option<Key>) -> bool {
    match b {
        None => true,
        Some((bv, bn, bc)) => a.0 > bv || (a.0 == bv && (a.1 > bn || (a.1 == bn && a.2 < bc))),
    }
}

/// Re-solves attempted with a tightened quantized budget before falling back
/// to dropping tensors.
pub const MAX_RESOLVES: usize = 8;

/// The DP over `(deepest selected tensor, quantized budget)`.
///
/// Unevaluated tensors are never selected. A tied tensor forces every
/// `t_dy`; plans containing it are solved as a knapsack over `t_dw` alone and
/// compared with the best plan without it.
///
/// Flooring can make a plan look cheaper than it is. When the unquantized
/// cost overshoots, the quantized budget is lowered by the overshoot and the
/// DP re-run, up to [`MAX_RESOLVES`] times; whatever still overshoots loses
/// its least important tensors.
pub fn dp_select(
    importance: &ImportanceVector,
    profile: &FlopsProfile,
    qp: &QuantizedProfile,
    rho: f64,
    options: SelectOptions,
) -> Result<SelectionPlan> {
    let n = profile.len();
    if importance.len() != n || qp.q_dy.len() != n {
        return Err(Error::Input("importance, profile and quantized profile differ in length".into()));
    }
    let real_budget = backprop_budget(profile, rho)?;
    let start = Instant::now();
    let mut budget = (real_budget * qp.z).floor() as u64;
    let (mut mask, mut solved) = solve(importance, profile, qp, budget, options);
    let dp_importance = cumulative_importance(importance, &mask);
    let mut resolves = 0;
    while resolves < MAX_RESOLVES && budget > 0 {
        let cost = profile.backprop_cost(&mask, options.convention) as f64;
        if cost <= real_budget {
            break;
        }
        let over = (((cost - real_budget) * qp.z).ceil() as u64).max(1);
        budget = budget.saturating_sub(over);
        let (m, s) = solve(importance, profile, qp, budget, options);
        mask = m;
        solved += s;
        resolves += 1;
    }
    let (mask, repaired) = repair(importance, profile, mask, real_budget, options.convention);
    let backprop = profile.backprop_cost(&mask, options.convention);
    Ok(SelectionPlan {
        predicted_flops: profile.t_fp + backprop,
        cumulative_importance: cumulative_importance(importance, &mask),
        dp_importance,
        feasible: backprop as f64 <= real_budget,
        mask,
        resolves,
        repaired,
        subproblems_solved: solved,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// One DP pass at quantized budget `budget`; returns the plan and the number
/// of subproblems visited.
fn solve(
    importance: &ImportanceVector,
    profile: &FlopsProfile,
    qp: &QuantizedProfile,
    budget: u64,
    options: SelectOptions,
) -> (SelectionMask, u64) {
    let n = profile.len();
    let exclusive = options.convention == DyConvention::Exclusive;

    let candidate = |k: usize| importance.evaluated[k] && !profile.tied.contains(&k);
    // Quantized dy of slots 0..=k (inclusive) or 0..k (exclusive).
    let mut reach = vec![0u64; n + 1];
    for j in 0..n {
        reach[j + 1] = reach[j] + qp.q_dy[j];
    }
    let path = |k: usize| if exclusive { reach[k] } else { reach[k + 1] };

    // Without pruning the table spans the whole resolution.
    let axis = if options.prune { budget } else { qp.t_q.max(budget) };
    let width = axis as usize + 1;
    let mut table: Vec<Vec<Option<State>>> = vec![Vec::new(); n];
    let mut solved = 0u64;

    for k in 0..n {
        let mut row = vec![None; width];
        if !candidate(k) {
            table[k] = row;
            continue;
        }
        let own = qp.q_dw[k] + path(k);
        let lo = if options.prune { own.min(axis + 1) } else { 0 };
        for t in lo..=axis {
            solved += 1;
            if t > budget || t < own {
                continue;
            }
            let mut best: Option<State> = Some(State {
                value: importance.values[k],
                count: positive(importance.values[k]),
                cost: own,
                parent: None,
            });
            for kc in 0..k {
                let delta = qp.q_dw[k] + path(k) - path(kc);
                if delta > t {
                    continue;
                }
                if let Some(prev) = table[kc][(t - delta) as usize] {
                    let value = prev.value + importance.values[k];
                    let cost = prev.cost + delta;
                    let count = prev.count + positive(importance.values[k]);
                    if better((value, count, cost), best.map(|b| (b.value, b.count, b.cost))) {
                        best = Some(State {
                            value,
                            count,
                            cost,
                            parent: Some((kc, t - delta)),
                        });
                    }
                }
            }
            row[t as usize] = best;
        }
        table[k] = row;
    }

    let mut best_mask = SelectionMask::empty(n);
    let mut best_key: Key = (0.0, 0, 0);
    for k in 0..n {
        if let Some(s) = table[k].get(budget as usize).copied().flatten() {
            if better((s.value, s.count, s.cost), Some(best_key)) {
                best_key = (s.value, s.count, s.cost);
                best_mask = backtrace(&table, k, budget, n);
            }
        }
    }

    for tied in profile.tied.iter().copied().filter(|&s| importance.evaluated[s]) {
        let fixed = qp.q_dw[tied] + reach[n];
        if fixed > budget {
            continue;
        }
        let items: Vec<usize> = (0..n).filter(|&k| candidate(k)).collect();
        let ((value, count, cost), mask) = knapsack(importance, qp, &items, budget - fixed, n);
        solved += (items.len() as u64) * (budget - fixed + 1);
        let value = value + importance.values[tied];
        let key = (value, count + positive(importance.values[tied]), cost + fixed);
        if better(key, Some(best_key)) {
            best_key = key;
            best_mask = mask;
            best_mask.set(tied, true);
        }
    }
    (best_mask, solved)
}

fn backtrace(table: &[Vec<Option<State>>], k: usize, t: u64, n: usize) -> SelectionMask {
    let mut mask = SelectionMask::empty(n);
    let mut cur = Some((k, t));
    while let Some((k, t)) = cur {
        mask.set(k, true);
        cur = table[k][t as usize].expect("backtrace through a solved state").parent;
    }
    mask
}

/// 0/1 knapsack over `q_dw` for the given items, ranked like the DP.
fn knapsack(
    importance: &ImportanceVector,
    qp: &QuantizedProfile,
    items: &[usize],
    capacity: u64,
    n: usize,
) -> (Key, SelectionMask) {
    let cap = capacity as usize;
    // best[i][c]: using the first i items, cost at most c
    let mut best: Vec<Vec<Key>> = vec![vec![(0.0, 0, 0); cap + 1]; items.len() + 1];
    for (i, &k) in items.iter().enumerate() {
        let w = qp.q_dw[k] as usize;
        let v = importance.values[k];
        for c in 0..=cap {
            let mut cell = best[i][c];
            if w <= c {
                let (pv, pn, pc) = best[i][c - w];
                let take = (pv + v, pn + positive(v), pc + w as u64);
                if better(take, Some(cell)) {
                    cell = take;
                }
            }
            best[i + 1][c] = cell;
        }
    }
    let mut mask = SelectionMask::empty(n);
    let mut c = cap;
    for i in (0..items.len()).rev() {
        if best[i + 1][c] != best[i][c] {
            mask.set(items[i], true);
            c -= qp.q_dw[items[i]] as usize;
        }
    }
    (best[items.len()][cap], mask)
}

/// Drops the least important selected tensor until the unquantized cost fits.
fn repair(
    importance: &ImportanceVector,
    profile: &FlopsProfile,
    mut mask: SelectionMask,
    real_budget: f64,
    convention: DyConvention,
) -> (SelectionMask, Vec<usize>) {
    let mut dropped = Vec::new();
    while profile.backprop_cost(&mask, convention) as f64 > real_budget {
        let worst = mask
            .selected()
            .min_by(|&a, &b| {
                importance.values[a]
                    .total_cmp(&importance.values[b])
                    .then(b.cmp(&a))
            })
            .expect("an empty mask always fits");
        mask.set(worst, false);
        dropped.push(worst);
    }
    (mask, dropped)
}

/// Exhaustive search over all `2^N` masks of evaluated tensors. Ties go to
/// more tensors with positive importance, then to the lexicographically
/// smallest mask (slot 0 first).
pub fn brute_force_select(
    importance: &ImportanceVector,
    profile: &FlopsProfile,
    rho: f64,
    convention: DyConvention,
) -> Result<SelectionPlan> {
    let n = profile.len();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            candidates: n,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let real_budget = backprop_budget(profile, rho)?;
    let start = Instant::now();
    let mut best: Option<(f64, u32, Vec<bool>)> = None;
    for bits in 0u64..(1u64 << n) {
        let v: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
        if v.iter().zip(&importance.evaluated).any(|(&s, &e)| s && !e) {
            continue;
        }
        let mask = SelectionMask::new(v);
        if profile.backprop_cost(&mask, convention) as f64 > real_budget {
            continue;
        }
        let value = cumulative_importance(importance, &mask);
        let count = mask.selected().map(|s| positive(importance.values[s])).sum::<u32>();
        let key = (value, count, mask.bits().to_vec());
        let replace = match &best {
            None => true,
            Some((bv, bc, bm)) => {
                value > *bv || (value == *bv && (count > *bc || (count == *bc && lex_less(&key.2, bm))))
            }
        };
        if replace {
            best = Some(key);
        }
    }
    let (value, _, bits) = best.expect("the empty mask is always feasible");
    let mask = SelectionMask::new(bits);
    Ok(SelectionPlan {
        predicted_flops: profile.t_fp + profile.backprop_cost(&mask, convention),
        cumulative_importance: value,
        dp_importance: value,
        resolves: 0,
        repaired: Vec::new(),
        subproblems_solved: 1 << n,
        feasible: true,
        mask,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// `a < b` reading masks as bit strings with slot 0 first.
fn lex_less(a: &[bool], b: &[bool]) -> bool {
    a.iter().zip(b).find(|(x, y)| x != y).is_some_and(|(x, _)| !x)
}

/// Plan serialized with tensor names.
pub fn plan_json(plan: &SelectionPlan, graph: &ModelGraph, profile: &FlopsProfile) -> serde_json::Value {
    let selected: Vec<&str> = plan.mask.selected().map(|s| graph.tensors[s].name.as_str()).collect();
    serde_json::json!({
        "selected": selected,
        "mask": plan.mask,
        "mask_forward_order": plan.mask.forward_order_string(),
        "predicted_flops": plan.predicted_flops,
        "t_full": profile.t_full,
        "t_fp": profile.t_fp,
        "predicted_reduction_pct": 100.0 * plan.reduction(profile),
        "cumulative_importance": plan.cumulative_importance,
        "dp_importance": plan.dp_importance,
        "resolves": plan.resolves,
        "repaired": plan.repaired.iter().map(|&s| graph.tensors[s].name.as_str()).collect::<Vec<_>>(),
        "subproblems_solved": plan.subproblems_solved,
        "feasible": plan.feasible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiler::BatchShape;

    fn profile(dy: Vec<u64>, dw: Vec<u64>, t_fp: u64) -> FlopsProfile {
        FlopsProfile::new(BatchShape { batch: 1, seq: 1 }, dy, dw, t_fp, vec![]).unwrap()
    }

    fn exact(p: &FlopsProfile) -> QuantizedProfile {
        quantize(p, p.t_full).unwrap()
    }

    #[test]
    fn quantize_floors() {
        let p = profile(vec![1234, 8766], vec![0, 0], 0);
        let q = quantize(&p, 1000).unwrap();
        assert_eq!(q.q_dy, vec![123, 876]);
        assert_eq!(exact(&p).q_dy, vec![1234, 8766]);
        assert!(quantize(&p, 0).is_err());
    }

    #[test]
    fn full_budget_selects_everything() {
        let p = profile(vec![3, 5, 7], vec![2, 2, 2], 4);
        let iv = ImportanceVector::from_raw(vec![0.5, 0.1, 0.9]);
        let plan = dp_select(&iv, &p, &exact(&p), 1.0, SelectOptions::default()).unwrap();
        assert_eq!(plan.mask, SelectionMask::full(3));
        assert_eq!(plan.predicted_flops, p.t_full);
    }

    #[test]
    fn single_slot_budget_picks_the_most_important() {
        // Exclusive, no dy: each tensor costs its dw of 10.
        let p = profile(vec![0, 0, 0], vec![10, 10, 10], 10);
        let iv = ImportanceVector::from_raw(vec![0.2, 1.0, 0.3]);
        let opts = SelectOptions {
            convention: DyConvention::Exclusive,
            prune: true,
        };
        let plan = dp_select(&iv, &p, &exact(&p), 0.5, opts).unwrap();
        assert_eq!(plan.mask, SelectionMask::from_slots(3, [1]));
    }

    #[test]
    fn infeasible_budget_is_reported() {
        let p = profile(vec![1], vec![1], 98);
        let iv = ImportanceVector::from_raw(vec![1.0]);
        let r = dp_select(&iv, &p, &exact(&p), 0.5, SelectOptions::default());
        assert!(matches!(r, Err(Error::InfeasibleBudget { .. })));
        assert!(matches!(
            brute_force_select(&iv, &p, 0.5, DyConvention::Inclusive),
            Err(Error::InfeasibleBudget { .. })
        ));
    }

    #[test]
    fn brute_force_small_cases() {
        let p = profile(vec![1], vec![1], 1);
        let plan = brute_force_select(&ImportanceVector::from_raw(vec![0.5]), &p, 1.0, DyConvention::Inclusive).unwrap();
        assert!(plan.mask.get(0));
        let plan = brute_force_select(&ImportanceVector::from_raw(vec![0.0]), &p, 1.0, DyConvention::Inclusive).unwrap();
        assert!(plan.mask.none());
        let zeros = ImportanceVector::from_raw(vec![0.0; 4]);
        let p4 = profile(vec![1; 4], vec![1; 4], 1);
        assert!(brute_force_select(&zeros, &p4, 1.0, DyConvention::Inclusive).unwrap().mask.none());
    }

    #[test]
    fn brute_force_refuses_large_graphs() {
        let p = profile(vec![1; 21], vec![1; 21], 1);
        let iv = ImportanceVector::from_raw(vec![1.0; 21]);
        assert!(matches!(
            brute_force_select(&iv, &p, 1.0, DyConvention::Inclusive),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn unevaluated_tensors_are_never_selected() {
        let p = profile(vec![1, 1, 1], vec![1, 1, 1], 1);
        let iv = ImportanceVector::with_evaluated(vec![1.0, 1.0, 5.0], vec![true, true, false]);
        let plan = dp_select(&iv, &p, &exact(&p), 1.0, SelectOptions::default()).unwrap();
        assert_eq!(plan.mask, SelectionMask::from_slots(3, [0, 1]));
    }

    #[test]
    fn tied_tensor_pays_all_dy() {
        let p = FlopsProfile::new(BatchShape { batch: 1, seq: 1 }, vec![5, 1, 1, 1], vec![1, 1, 1, 1], 2, vec![0])
            .unwrap();
        let iv = ImportanceVector::from_raw(vec![1.0, 0.25, 0.25, 0.25]);
        for rho in [0.5, 0.6, 0.7, 0.8, 0.9, 1.0] {
            let dp = dp_select(&iv, &p, &exact(&p), rho, SelectOptions::default()).unwrap();
            let bf = brute_force_select(&iv, &p, rho, DyConvention::Inclusive).unwrap();
            assert_eq!(dp.cumulative_importance, bf.cumulative_importance, "rho {rho}");
        }
    }

    #[test]
    fn repair_restores_the_real_budget() {
        // Every tensor quantizes to zero at T_q = 1.
        let p = profile(vec![10, 10, 10, 10], vec![10, 10, 10, 10], 10);
        let iv = ImportanceVector::from_raw(vec![0.4, 0.3, 0.2, 0.1]);
        let plan = dp_select(&iv, &p, &quantize(&p, 1).unwrap(), 0.5, SelectOptions::default()).unwrap();
        assert!(plan.feasible);
        assert!(!plan.repaired.is_empty());
        assert!(plan.predicted_flops as f64 <= 0.5 * p.t_full as f64);
        assert!(plan.dp_importance > plan.cumulative_importance);
    }
}
