//! The acceptance checks, runnable from tests and from the command line.
//!
//! Every check returns a [`Check`] with a one-line verdict. The oracles used
//! here (central differences, the FLOPs meter, exhaustive search, the undo
//! measurement) are computed independently of the quantities they check.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{backward_full, backward_selective, finite_diff_grad, ParamStore, FD_STEP};
use crate::config::{LrSchedule, RunConfig, Strategy};
use crate::error::Result;
use crate::graph::{DyConvention, ModelGraph, SelectionMask, TensorKind};
use crate::importance::{
    early_stop_depth, evaluate_importance, spearman, tensor_importance, undo_oracle, ImportanceVector,
};
use crate::model::{build_toy_decoder, forward, Batch, ToyModelConfig};
use crate::optimizer::{Optimizer, OptimizerConfig};
use crate::profiler::{profile_flops, selective_cost, verify_against_meter, BatchShape, FlopsProfile};
use crate::selector::{brute_force_select, dp_select, quantize, SelectOptions};
use crate::synth::{SynthTask, TaskKind};
use crate::trainer::{train, train_from};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub criterion: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}. {}: {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.criterion,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn timed(criterion: u8, name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = match body() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    Check {
        criterion,
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// A small 2-block decoder that keeps the oracle checks fast.
pub fn small_decoder(seed: u64) -> ToyModelConfig {
    ToyModelConfig {
        blocks: 2,
        d: 16,
        h: 2,
        ffn_width: 32,
        vocab: 16,
        n: 10,
        seed,
    }
}

fn copy_batch(cfg: &ToyModelConfig, seed: u64, count: usize) -> Batch {
    let task = SynthTask {
        max_len: (cfg.n - 2) / 2,
        seed,
        ..SynthTask::default()
    };
    task.batch(0, count, cfg.vocab, cfg.n).into()
}

fn random_mask(n: usize, rng: &mut impl Rng) -> SelectionMask {
    let p: f64 = rng.random_range(0.05..0.95);
    SelectionMask::new((0..n).map(|_| rng.random_bool(p)).collect())
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|)` is below this.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for coordinates whose gradient is numerically zero.
pub const GRAD_FLOOR: f64 = 1e-8;

/// Full backward against central differences, at least `per_kind`
/// coordinates for every tensor kind.
///
/// The numeric side combines steps `h` and `2h` as `(4·D(h) − D(2h)) / 3`,
/// which cancels the `h²` truncation term of the plain central difference.
pub fn gradient_correctness(per_kind: usize, seed: u64) -> Check {
    timed(1, "gradient correctness", || {
        let cfg = ToyModelConfig {
            seed,
            ..ToyModelConfig::default()
        };
        let (graph, params) = build_toy_decoder(&cfg)?;
        let batch = copy_batch(&cfg, seed, 4);
        let tape = forward(&graph, &params, &batch)?;
        let (grads, _) = backward_full(&tape);
        drop(tape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kinds = [
            TensorKind::TiedEmbedding,
            TensorKind::LinearWeight,
            TensorKind::Bias,
            TensorKind::LayerNormGain,
            TensorKind::LayerNormBias,
        ];
        let mut worst = 0.0f64;
        let mut raw_worst = 0.0f64;
        let mut summary = Vec::new();
        for kind in kinds {
            let slots: Vec<usize> = (0..graph.len()).filter(|&s| graph.tensors[s].kind == kind).collect();
            let per_tensor = per_kind.div_ceil(slots.len().max(1));
            let mut probed = 0;
            let mut kind_worst = 0.0f64;
            for &slot in &slots {
                let loss = |p: &ParamStore| forward(&graph, p, &batch).map(|t| t.loss()).unwrap_or(f64::NAN);
                let mut again = rng.clone();
                let fine = finite_diff_grad(loss, &params, slot, per_tensor, FD_STEP, &mut rng);
                let coarse = finite_diff_grad(loss, &params, slot, per_tensor, 2.0 * FD_STEP, &mut again);
                let g = grads.get(slot).expect("full backward computes every gradient");
                for (f, c) in fine.iter().zip(&coarse) {
                    let a = g.data[f.index];
                    let rel = |n: f64| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR);
                    raw_worst = raw_worst.max(rel(f.numeric));
                    kind_worst = kind_worst.max(rel((4.0 * f.numeric - c.numeric) / 3.0));
                    probed += 1;
                }
            }
            if probed < per_kind {
                return Ok((false, format!("{kind:?}: only {probed} coordinates available")));
            }
            worst = worst.max(kind_worst);
            summary.push(format!("{kind:?} {probed}@{kind_worst:.1e}"));
        }
        Ok((
            worst < GRAD_TOLERANCE,
            format!(
                "max rel err {worst:.2e} < {GRAD_TOLERANCE:.0e} (plain h={FD_STEP:.0e}: {raw_worst:.2e}); {}",
                summary.join(", ")
            ),
        ))
    })
}

/// Selected tensors' gradients from the selective pass equal the full pass
/// bit for bit, and no unselected tensor gets weight-gradient work.
pub fn selective_equals_full(masks: usize, seeds: u64) -> Check {
    timed(2, "selective = full", || {
        let mut compared = 0usize;
        for seed in 0..seeds {
            let cfg = small_decoder(seed);
            let (graph, params) = build_toy_decoder(&cfg)?;
            let batch = copy_batch(&cfg, seed, 4);
            let tape = forward(&graph, &params, &batch)?;
            let (full, _) = backward_full(&tape);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            for i in 0..masks {
                let mask = random_mask(graph.len(), &mut rng);
                let conv = if i % 2 == 0 {
                    DyConvention::Inclusive
                } else {
                    DyConvention::Exclusive
                };
                let (sel, meter) = backward_selective(&tape, &graph, &mask, conv);
                for slot in 0..graph.len() {
                    if mask.get(slot) {
                        let a = sel.get(slot).map(|m| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
                        let b = full.get(slot).map(|m| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
                        if a != b {
                            return Ok((false, format!("seed {seed}, mask {i}: slot {slot} differs")));
                        }
                        compared += 1;
                    } else if sel.get(slot).is_some() || meter.dw[slot] != 0 {
                        return Ok((false, format!("seed {seed}, mask {i}: unselected slot {slot} has dw work")));
                    }
                }
            }
        }
        Ok((
            true,
            format!("{masks} masks x {seeds} seeds, {compared} tensor gradients bitwise equal"),
        ))
    })
}

/// Predicted selective backprop cost against the meter, for random masks on
/// several model sizes.
pub fn profiler_fidelity(masks: usize) -> Check {
    timed(3, "profiler fidelity", || {
        let sizes = [(1usize, 8usize, 2usize), (2, 16, 4), (3, 24, 4)];
        let mut worst = 0.0f64;
        let mut exact_weights = true;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (blocks, d, h) in sizes {
            let cfg = ToyModelConfig {
                blocks,
                d,
                h,
                ffn_width: 2 * d,
                vocab: 16,
                n: 10,
                seed: blocks as u64,
            };
            let (graph, params) = build_toy_decoder(&cfg)?;
            let batch = copy_batch(&cfg, 0, 3);
            let profile = profile_flops(&graph, BatchShape { batch: 3, seq: cfg.n })?;
            let tape = forward(&graph, &params, &batch)?;
            for _ in 0..masks {
                let mask = random_mask(graph.len(), &mut rng);
                let (_, mut meter) = backward_selective(&tape, &graph, &mask, DyConvention::Inclusive);
                meter.fp_flops = tape.fp_flops();
                let report = verify_against_meter(&profile, &mask, DyConvention::Inclusive, &meter, 0.01)?;
                let predicted = selective_cost(&profile, &mask, DyConvention::Inclusive) - profile.t_fp;
                let rel = predicted.abs_diff(meter.backprop_total()) as f64 / predicted.max(1) as f64;
                worst = worst.max(rel);
                for t in &report.tensors {
                    let kind = graph.tensors[t.slot].kind;
                    let matmul = matches!(kind, TensorKind::LinearWeight | TensorKind::TiedEmbedding);
                    if matmul && (t.predicted_dw != t.measured_dw || t.predicted_dy != t.measured_dy) {
                        exact_weights = false;
                    }
                }
            }
        }
        Ok((
            worst <= 0.01 && exact_weights,
            format!(
                "{masks} masks x {} sizes, max rel err {worst:.2e}, matmul buckets exact: {exact_weights}",
                sizes.len()
            ),
        ))
    })
}

/// A random integer profile with `n` tensors, optionally tying slot 0.
pub fn random_profile(n: usize, tied: bool, rng: &mut impl Rng) -> FlopsProfile {
    let t_dy: Vec<u64> = (0..n).map(|_| rng.random_range(0..40)).collect();
    let t_dw: Vec<u64> = (0..n).map(|_| rng.random_range(1..40)).collect();
    let t_fp = rng.random_range(1..200);
    FlopsProfile::new(
        BatchShape { batch: 1, seq: 1 },
        t_dy,
        t_dw,
        t_fp,
        if tied { vec![0] } else { Vec::new() },
    )
    .expect("valid random profile")
}

/// Importances on a dyadic grid, so every summation order is exact.
pub fn dyadic_importance(n: usize, rng: &mut impl Rng) -> ImportanceVector {
    ImportanceVector::from_raw((0..n).map(|_| rng.random_range(0..=64) as f64 / 64.0).collect())
}

/// DP against brute force at `Z = 1`, and pruned against unpruned DP.
pub fn dp_optimality(instances: usize) -> Check {
    timed(4, "DP optimality", || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut solved = 0;
        for i in 0..instances {
            let n = rng.random_range(1..=15);
            let profile = random_profile(n, rng.random_bool(0.3), &mut rng);
            let iv = dyadic_importance(n, &mut rng);
            let lo = profile.t_fp as f64 / profile.t_full as f64;
            let rho = rng.random_range(lo..=1.0).max(lo);
            let conv = if rng.random_bool(0.5) {
                DyConvention::Inclusive
            } else {
                DyConvention::Exclusive
            };
            let qp = quantize(&profile, profile.t_full)?;
            let pruned = dp_select(&iv, &profile, &qp, rho, SelectOptions { convention: conv, prune: true })?;
            let full = dp_select(&iv, &profile, &qp, rho, SelectOptions { convention: conv, prune: false })?;
            let brute = brute_force_select(&iv, &profile, rho, conv)?;
            if pruned.cumulative_importance != brute.cumulative_importance {
                return Ok((
                    false,
                    format!(
                        "instance {i}: dp {} vs brute force {}",
                        pruned.cumulative_importance, brute.cumulative_importance
                    ),
                ));
            }
            if pruned.mask != full.mask {
                return Ok((false, format!("instance {i}: pruning changed the plan")));
            }
            solved += 1;
        }
        Ok((true, format!("{solved} instances, N <= 15, dp = brute force, pruned = unpruned")))
    })
}

/// Adaptive runs keep every metered training step within `rho * T_full`
/// plus 1%.
pub fn budget_compliance(rhos: &[f64], steps: usize) -> Check {
    timed(5, "budget compliance", || {
        let mut parts = Vec::new();
        let mut ok = true;
        for &rho in rhos {
            let mut c = RunConfig::default();
            c.selector.rho = rho;
            c.run.strategy = Strategy::Adaptive;
            c.run.epochs = 5;
            c.run.steps_per_epoch = steps.div_ceil(5);
            c.run.eval_every = Some(c.run.steps_per_epoch / 2);
            let r = train(&c)?.report;
            let pass = r.max_step_ratio <= rho * 1.01;
            ok &= pass;
            parts.push(format!("rho {rho}: max step {:.4} T_full", r.max_step_ratio));
        }
        Ok((ok, parts.join(", ")))
    })
}

/// Per-tensor agreement between `ε · I_raw` and the undo measurement, and
/// their rank correlation.
pub const IMPORTANCE_EPS: f64 = 1e-4;
pub const IMPORTANCE_TOLERANCE: f64 = 0.05;
/// Tensors whose `|I_raw|` is below this fraction of the largest are compared
/// on the absolute scale of the largest instead of their own.
pub const NEGLIGIBLE_IMPORTANCE: f64 = 1e-6;

pub fn importance_validity(seed: u64) -> Check {
    timed(6, "importance first-order validity", || {
        let cfg = small_decoder(seed);
        let (graph, params) = build_toy_decoder(&cfg)?;
        let batch = copy_batch(&cfg, seed, 4);
        let tape = forward(&graph, &params, &batch)?;
        let (grads, _) = backward_full(&tape);
        drop(tape);
        let optimizer = Optimizer::new(OptimizerConfig::default(), &params);
        let deltas = optimizer.hypothetical_update(&params, &grads);
        let iv = tensor_importance(&graph, &deltas, &grads)?;
        let max = iv.raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut undo = Vec::with_capacity(graph.len());
        let mut worst = 0.0f64;
        let mut worst_name = String::new();
        let mut negligible = 0;
        for slot in 0..graph.len() {
            let dl = undo_oracle(&graph, &params, &batch, &deltas, IMPORTANCE_EPS, slot)?;
            undo.push(dl);
            let estimate = iv.raw[slot];
            let measured = dl / IMPORTANCE_EPS;
            let scale = if estimate.abs() < NEGLIGIBLE_IMPORTANCE * max {
                negligible += 1;
                max
            } else {
                estimate.abs()
            };
            let err = (measured - estimate).abs() / scale;
            if err > worst {
                worst = err;
                worst_name = graph.tensors[slot].name.clone();
            }
        }
        let rho = spearman(&iv.raw, &undo);
        Ok((
            worst <= IMPORTANCE_TOLERANCE && rho >= 0.9,
            format!(
                "max rel err {worst:.2e} ({worst_name}), {negligible} negligible tensors, spearman {rho:.4}"
            ),
        ))
    })
}

/// No feasible plan reaches below the early-stop depth (inclusive
/// convention), checked by enumerating every mask of a 1-block decoder and of
/// a 19-layer dense chain.
pub fn early_stop_soundness(rhos: &[f64]) -> Check {
    timed(7, "early-stop soundness", || {
        let cfg = ToyModelConfig {
            blocks: 1,
            ..ToyModelConfig::default()
        };
        let (decoder, _) = build_toy_decoder(&cfg)?;
        let widths: Vec<usize> = (0..20).map(|i| 4 + (i * 7) % 13).collect();
        let chain = ModelGraph::dense_chain(&widths)?;
        let models = [
            ("decoder", profile_flops(&decoder, BatchShape { batch: 4, seq: cfg.n })?),
            ("chain", profile_flops(&chain, BatchShape { batch: 8, seq: 1 })?),
        ];
        let mut parts = Vec::new();
        let mut ok = true;
        for (label, profile) in &models {
            let n = profile.len();
            for &rho in rhos {
                let depth = early_stop_depth(profile, rho)?;
                let budget = rho * profile.t_full as f64;
                let mut feasible = 0u64;
                let mut violations = 0u64;
                for bits in 0u64..(1u64 << n) {
                    let mask = SelectionMask::new((0..n).map(|i| bits >> i & 1 == 1).collect());
                    if selective_cost(profile, &mask, DyConvention::Inclusive) as f64 > budget {
                        continue;
                    }
                    feasible += 1;
                    if mask.deepest().is_some_and(|d| d >= depth) {
                        violations += 1;
                    }
                }
                ok &= violations == 0 && feasible > 0;
                parts.push(format!("{label} rho {rho}: depth {depth}/{n}, {feasible} feasible, {violations} too deep"));
            }
        }
        Ok((ok, parts.join("; ")))
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct QuantizationRow {
    pub seed: u64,
    pub t_q: u64,
    /// `1 − metered step cost / T_full`.
    pub realized_reduction: f64,
    pub miss_pp: f64,
}

/// Realized FLOPs reduction of DP plans at several resolutions, and DP time
/// against `T_q`.
pub fn quantization_behavior(seeds: u64) -> Check {
    timed(8, "quantization behavior", || {
        let rho = 0.5;
        let target = 1.0 - rho;
        let mut rows = Vec::new();
        let mut timing_iv = None;
        for seed in 0..seeds {
            let cfg = ToyModelConfig {
                seed,
                ..ToyModelConfig::default()
            };
            let (graph, params) = build_toy_decoder(&cfg)?;
            let task = SynthTask {
                seed,
                ..SynthTask::default()
            };
            let batch: Batch = task.batch(0, 16, cfg.vocab, cfg.n).into();
            let profile = profile_flops(&graph, BatchShape { batch: 16, seq: cfg.n })?;
            let optimizer = Optimizer::new(OptimizerConfig::default(), &params);
            let depth = early_stop_depth(&profile, rho)?;
            let (iv, _) = evaluate_importance(&graph, &params, &batch, &optimizer, depth)?;
            let tape = forward(&graph, &params, &batch)?;
            for t_q in [10u64, 1_000, 10_000] {
                let plan = dp_select(&iv, &profile, &quantize(&profile, t_q)?, rho, SelectOptions::default())?;
                let (_, meter) = backward_selective(&tape, &graph, &plan.mask, DyConvention::Inclusive);
                let realized = 1.0 - (tape.fp_flops() + meter.backprop_total()) as f64 / profile.t_full as f64;
                rows.push(QuantizationRow {
                    seed,
                    t_q,
                    realized_reduction: realized,
                    miss_pp: (realized - target).abs() * 100.0,
                });
            }
            if timing_iv.is_none() {
                timing_iv = Some((iv, profile));
            }
        }
        let coarse_misses = rows.iter().filter(|r| r.t_q == 10 && r.miss_pp > 5.0).count();
        let fine_ok = rows.iter().filter(|r| r.t_q >= 1_000).all(|r| r.miss_pp <= 5.0);
        let (iv, profile) = timing_iv.expect("at least one seed");
        let resolutions = [4_000u64, 8_000, 16_000, 32_000];
        let mut times = Vec::new();
        for &t_q in &resolutions {
            let qp = quantize(&profile, t_q)?;
            let best = (0..5)
                .map(|_| dp_select(&iv, &profile, &qp, rho, SelectOptions::default()).map(|p| p.seconds))
                .collect::<Result<Vec<f64>>>()?
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            times.push(best);
        }
        let ratios: Vec<f64> = times.windows(2).map(|w| w[1] / w[0]).collect();
        let linear = ratios.iter().all(|&r| (1.0..=4.0).contains(&r));
        let worst_coarse = rows
            .iter()
            .filter(|r| r.t_q == 10)
            .map(|r| r.miss_pp)
            .fold(0.0f64, f64::max);
        let worst_fine = rows
            .iter()
            .filter(|r| r.t_q >= 1_000)
            .map(|r| r.miss_pp)
            .fold(0.0f64, f64::max);
        Ok((
            coarse_misses >= 1 && fine_ok && linear,
            format!(
                "T_q=10 misses >5pp in {coarse_misses}/{seeds} seeds (worst {worst_coarse:.1}pp); \
                 T_q>=1e3 worst miss {worst_fine:.1}pp; DP time ratios per doubling {:?}",
                ratios.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>()
            ),
        ))
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EndToEndRow {
    pub seed: u64,
    pub full_ft: f64,
    pub adaptive: f64,
    pub fixed_top_k: f64,
    pub static_first_epoch: f64,
    /// Adaptive's measured FLOPs over full fine-tuning's.
    pub adaptive_flops_ratio: f64,
    pub fixed_flops_ratio: f64,
}

/// Settings of the end-to-end comparison.
#[derive(Debug, Clone)]
pub struct EndToEnd {
    pub pretrain_steps: usize,
    pub finetune_epochs: usize,
    pub steps_per_epoch: usize,
    pub seeds: u64,
}

impl Default for EndToEnd {
    fn default() -> Self {
        EndToEnd {
            pretrain_steps: 3000,
            finetune_epochs: 10,
            steps_per_epoch: 200,
            seeds: 5,
        }
    }
}

impl EndToEnd {
    /// The fine-tuning configuration for one strategy and seed.
    pub fn finetune_config(&self, strategy: Strategy, seed: u64) -> RunConfig {
        let mut c = RunConfig::default();
        c.task.seed = seed;
        c.selector.rho = 0.5;
        c.optimizer.lr = 3e-3;
        c.run.strategy = strategy;
        c.run.epochs = self.finetune_epochs;
        c.run.steps_per_epoch = self.steps_per_epoch;
        c.run.eval_every = Some(100);
        c
    }

    /// The base model: full training on the substitution task.
    pub fn pretrain_config(&self) -> RunConfig {
        let mut c = RunConfig::default();
        c.task.kind = TaskKind::Substitute;
        c.run.strategy = Strategy::FullFt;
        c.run.epochs = 10;
        c.run.steps_per_epoch = self.pretrain_steps.div_ceil(10);
        c.run.lr_schedule = LrSchedule::Linear;
        c
    }
}

/// Fine-tunes a pretrained base on Copy with every strategy and compares
/// final accuracy and measured FLOPs.
pub fn end_to_end(settings: &EndToEnd) -> (Check, Vec<EndToEndRow>) {
    let mut rows = Vec::new();
    let check = timed(9, "end-to-end analogue", || {
        let base = train(&settings.pretrain_config())?;
        let mut adaptive_close = 0;
        let mut budget_ok = true;
        let mut fixed_not_better = 0;
        let mut static_not_better = 0;
        for seed in 1..=settings.seeds {
            let run = |s: Strategy| train_from(&settings.finetune_config(s, seed), base.graph.clone(), base.params.clone());
            let full = run(Strategy::FullFt)?.report;
            let adaptive = run(Strategy::Adaptive)?.report;
            let fixed = run(Strategy::FixedTopK)?.report;
            let stat = run(Strategy::StaticFirstEpoch)?.report;
            let row = EndToEndRow {
                seed,
                full_ft: full.final_eval_accuracy,
                adaptive: adaptive.final_eval_accuracy,
                fixed_top_k: fixed.final_eval_accuracy,
                static_first_epoch: stat.final_eval_accuracy,
                adaptive_flops_ratio: adaptive.total_flops as f64 / full.total_flops as f64,
                fixed_flops_ratio: fixed.total_flops as f64 / full.total_flops as f64,
            };
            adaptive_close += usize::from(row.full_ft - row.adaptive <= 0.05);
            budget_ok &= row.adaptive_flops_ratio <= 0.51;
            fixed_not_better += usize::from(row.fixed_top_k <= row.adaptive);
            static_not_better += usize::from(row.static_first_epoch <= row.adaptive);
            rows.push(row);
        }
        let n = settings.seeds as usize;
        let passed = adaptive_close == n && budget_ok && fixed_not_better >= 4 && static_not_better >= 3;
        let mean = |f: fn(&EndToEndRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
        Ok((
            passed,
            format!(
                "adaptive within 5pt of full in {adaptive_close}/{n} seeds (mean acc full {:.3}, adaptive {:.3}, \
                 fixed {:.3}, static {:.3}); adaptive FLOPs {:.3} of full (<= 0.51: {budget_ok}); \
                 fixed <= adaptive in {fixed_not_better}/{n}; static <= adaptive in {static_not_better}/{n}",
                mean(|r| r.full_ft),
                mean(|r| r.adaptive),
                mean(|r| r.fixed_top_k),
                mean(|r| r.static_first_epoch),
                mean(|r| r.adaptive_flops_ratio),
            ),
        ))
    });
    (check, rows)
}

/// The checks that need no training: gradients, selective execution,
/// profiler, DP, importance and early stopping.
pub fn oracle_suite() -> Vec<Check> {
    vec![
        gradient_correctness(64, 0),
        selective_equals_full(100, 5),
        profiler_fidelity(100),
        dp_optimality(200),
        importance_validity(0),
        early_stop_soundness(&[0.34, 0.5]),
    ]
}
