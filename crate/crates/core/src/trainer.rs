//! The training loop: evaluate importance, plan, then train the selected
//! tensors until the next evaluation event.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{backward_selective, ParamStore};
use crate::config::{LrSchedule, RunConfig, Strategy};
use crate::error::{Error, Result};
use crate::graph::{DyConvention, ModelGraph, SelectionMask};
use crate::importance::{early_stop_depth, evaluate_importance, ImportanceVector};
use crate::model::{build_toy_decoder, evaluate, forward, Batch, TokenBatch};
use crate::optimizer::Optimizer;
use crate::profiler::{profile_flops, selective_cost, BatchShape, FlopsProfile};
use crate::selector::{cumulative_importance, dp_select, quantize, SelectOptions};
use crate::synth::heldout_batch;

/// One importance evaluation and the plan made from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvent {
    pub epoch: usize,
    /// Global step at which the new mask takes effect.
    pub step: usize,
    /// Index of the training batch used for the evaluation.
    pub batch_index: usize,
    pub evaluated_depth: usize,
    pub importance: Vec<f64>,
    pub mask: SelectionMask,
    pub predicted_flops: u64,
    pub cumulative_importance: f64,
    /// FLOPs of the evaluation pass (forward plus early-stopped backward).
    pub evaluation_flops: u64,
    pub selection_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Tensors trained at the end of the epoch.
    pub selected: Vec<String>,
    pub mask_forward_order: String,
    /// Predicted cost of one training step at the end of the epoch.
    pub predicted_flops: u64,
    /// Metered training-step FLOPs, summed over the epoch.
    pub measured_flops: u64,
    pub max_step_flops: u64,
    /// Evaluation-pass FLOPs charged to this epoch.
    pub evaluation_flops: u64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    pub cumulative_importance: f64,
    pub selection_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub strategy: Strategy,
    pub rho: f64,
    pub t_fp: u64,
    pub t_full: u64,
    pub steps: usize,
    pub epochs: Vec<EpochRecord>,
    pub events: Vec<SelectionEvent>,
    /// Training steps plus evaluation passes.
    pub total_flops: u64,
    /// What full fine-tuning would have spent on the same steps.
    pub full_ft_flops: u64,
    pub realized_reduction: f64,
    /// Largest metered step cost over `T_full`.
    pub max_step_ratio: f64,
    /// Largest relative gap between a step's metered and predicted cost.
    pub max_step_prediction_error: f64,
    pub final_eval_loss: f64,
    pub final_eval_accuracy: f64,
}

impl TrainReport {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = dir.join("report.json");
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
        let csv_path = dir.join("epochs.csv");
        let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let csv_err = |e: csv::Error| Error::Input(format!("{}: {e}", csv_path.display()));
        w.write_record([
            "epoch",
            "selected_count",
            "mask_forward_order",
            "predicted_flops",
            "measured_flops",
            "max_step_flops",
            "evaluation_flops",
            "train_loss",
            "eval_loss",
            "eval_accuracy",
            "cumulative_importance",
            "selection_seconds",
        ])
        .map_err(csv_err)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.selected.len().to_string(),
                e.mask_forward_order.clone(),
                e.predicted_flops.to_string(),
                e.measured_flops.to_string(),
                e.max_step_flops.to_string(),
                e.evaluation_flops.to_string(),
                format!("{:.6}", e.train_loss),
                format!("{:.6}", e.eval_loss),
                format!("{:.6}", e.eval_accuracy),
                format!("{:.6}", e.cumulative_importance),
                format!("{:.6}", e.selection_seconds),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub graph: ModelGraph,
    pub params: ParamStore,
}

/// The deepest bp-order prefix of untied tensors whose cost fits `rho`.
pub fn fixed_top_k(graph: &ModelGraph, profile: &FlopsProfile, rho: f64, convention: DyConvention) -> SelectionMask {
    let n = graph.len();
    let budget = rho * profile.t_full as f64;
    let mut mask = SelectionMask::empty(n);
    for slot in 0..n {
        if graph.is_tied_slot(slot) {
            continue;
        }
        mask.set(slot, true);
        if selective_cost(profile, &mask, convention) as f64 > budget {
            mask.set(slot, false);
            break;
        }
    }
    mask
}

struct Planner<'a> {
    config: &'a RunConfig,
    graph: &'a ModelGraph,
    profile: &'a FlopsProfile,
    depth: usize,
}

impl Planner<'_> {
    fn plan(
        &self,
        params: &ParamStore,
        optimizer: &Optimizer,
        batch: &Batch,
    ) -> Result<(ImportanceVector, crate::selector::SelectionPlan, u64, f64)> {
        let start = Instant::now();
        let (iv, meter) = evaluate_importance(self.graph, params, batch, optimizer, self.depth)?;
        let sel = &self.config.selector;
        let qp = quantize(self.profile, sel.t_q)?;
        let opts = SelectOptions {
            convention: sel.dy_convention,
            prune: sel.prune,
        };
        let plan = dp_select(&iv, self.profile, &qp, sel.rho, opts)?;
        Ok((iv, plan, meter.total(), start.elapsed().as_secs_f64()))
    }
}

/// Runs the configured strategy from a fresh model.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let (graph, params) = build_toy_decoder(&config.model)?;
    train_from(config, graph, params)
}

pub fn train_from(config: &RunConfig, graph: ModelGraph, mut params: ParamStore) -> Result<TrainOutcome> {
    config.validate()?;
    let run = &config.run;
    let sel = &config.selector;
    let seq = config.model.n;
    let vocab = config.model.vocab;
    let profile = profile_flops(
        &graph,
        BatchShape {
            batch: run.batch_size,
            seq,
        },
    )?;
    if sel.rho * (profile.t_full as f64) < profile.t_fp as f64 {
        return Err(Error::InfeasibleBudget {
            budget: sel.rho * profile.t_full as f64,
            forward: profile.t_fp,
        });
    }
    let heldout = heldout_batch(&config.task, run.eval_examples, vocab, seq);
    let train_batch = |index: usize| -> TokenBatch {
        config
            .task
            .batch((index * run.batch_size) as u64, run.batch_size, vocab, seq)
    };

    let mut optimizer = Optimizer::new(config.optimizer, &params);
    let planner = Planner {
        config,
        graph: &graph,
        profile: &profile,
        depth: early_stop_depth(&profile, sel.rho)?,
    };
    let n = graph.len();
    let convention = sel.dy_convention;
    let mut mask = match run.strategy {
        Strategy::FullFt => SelectionMask::full(n),
        Strategy::FixedTopK => fixed_top_k(&graph, &profile, sel.rho, convention),
        Strategy::Adaptive | Strategy::StaticFirstEpoch => SelectionMask::empty(n),
    };
    let uses_selector = matches!(run.strategy, Strategy::Adaptive | Strategy::StaticFirstEpoch);
    let mut current_importance = 0.0;

    let mut epochs = Vec::with_capacity(run.epochs);
    let mut events = Vec::new();
    let mut total_flops = 0u64;
    let mut max_step = 0u64;
    let mut max_err = 0.0f64;
    let mut step = 0usize;
    let total_steps = run.epochs * run.steps_per_epoch;
    for epoch in 0..run.epochs {
        let mut record = EpochRecord {
            epoch,
            selected: Vec::new(),
            mask_forward_order: String::new(),
            predicted_flops: 0,
            measured_flops: 0,
            max_step_flops: 0,
            evaluation_flops: 0,
            train_loss: 0.0,
            eval_loss: 0.0,
            eval_accuracy: 0.0,
            cumulative_importance: 0.0,
            selection_seconds: 0.0,
        };
        let mut loss_sum = 0.0;
        for i in 0..run.steps_per_epoch {
            let is_event = match run.eval_every {
                None => i == 0,
                Some(every) => step % every == 0,
            };
            let replan = uses_selector && is_event && (run.strategy == Strategy::Adaptive || events.is_empty());
            let batch: Batch = train_batch(step).into();
            if replan {
                let (iv, plan, eval_flops, secs) = planner.plan(&params, &optimizer, &batch)?;
                mask = plan.mask.clone();
                current_importance = plan.cumulative_importance;
                record.evaluation_flops += eval_flops;
                record.selection_seconds += secs;
                total_flops += eval_flops;
                events.push(SelectionEvent {
                    epoch,
                    step,
                    batch_index: step,
                    evaluated_depth: iv.evaluated_depth,
                    importance: iv.values,
                    mask: plan.mask,
                    predicted_flops: plan.predicted_flops,
                    cumulative_importance: plan.cumulative_importance,
                    evaluation_flops: eval_flops,
                    selection_seconds: secs,
                });
            }

            if run.lr_schedule == LrSchedule::Linear {
                optimizer.config.lr = config.optimizer.lr * (1.0 - step as f64 / total_steps as f64);
            }
            let tape = forward(&graph, &params, &batch)?;
            let loss = tape.loss();
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            loss_sum += loss;
            let (grads, meter) = backward_selective(&tape, &graph, &mask, convention);
            drop(tape);
            optimizer.step(&mut params, &grads, &mask);
            let measured = meter.total();
            let predicted = selective_cost(&profile, &mask, convention);
            max_err = max_err.max(measured.abs_diff(predicted) as f64 / predicted as f64);
            record.measured_flops += measured;
            record.max_step_flops = record.max_step_flops.max(measured);
            max_step = max_step.max(measured);
            total_flops += measured;
            step += 1;
        }
        let eval = evaluate(&graph, &params, &heldout)?;
        if !eval.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                loss: eval.loss,
            });
        }
        record.selected = mask.selected().map(|s| graph.tensors[s].name.clone()).collect();
        record.mask_forward_order = mask.forward_order_string();
        record.predicted_flops = selective_cost(&profile, &mask, convention);
        record.train_loss = loss_sum / run.steps_per_epoch as f64;
        record.eval_loss = eval.loss;
        record.eval_accuracy = eval.accuracy();
        record.cumulative_importance = if uses_selector { current_importance } else { 0.0 };
        epochs.push(record);
    }

    let full_ft_flops = profile.t_full * step as u64;
    let last = epochs.last().expect("at least one epoch");
    let report = TrainReport {
        strategy: run.strategy,
        rho: sel.rho,
        t_fp: profile.t_fp,
        t_full: profile.t_full,
        steps: step,
        final_eval_loss: last.eval_loss,
        final_eval_accuracy: last.eval_accuracy,
        epochs,
        events,
        total_flops,
        full_ft_flops,
        realized_reduction: 1.0 - total_flops as f64 / full_ft_flops as f64,
        max_step_ratio: max_step as f64 / profile.t_full as f64,
        max_step_prediction_error: max_err,
    };
    Ok(TrainOutcome { report, graph, params })
}

/// Convenience for callers that only need the plan cost of an importance
/// vector under the run's selector settings.
pub fn plan_importance(config: &RunConfig, profile: &FlopsProfile, importance: &ImportanceVector) -> Result<f64> {
    let qp = quantize(profile, config.selector.t_q)?;
    let opts = SelectOptions {
        convention: config.selector.dy_convention,
        prune: config.selector.prune,
    };
    let plan = dp_select(importance, profile, &qp, config.selector.rho, opts)?;
    Ok(cumulative_importance(importance, &plan.mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ToyModelConfig;
    use crate::synth::SynthTask;

    fn small(strategy: Strategy) -> RunConfig {
        let mut c = RunConfig::default();
        c.model = ToyModelConfig {
            blocks: 2,
            d: 8,
            h: 2,
            ffn_width: 16,
            vocab: 12,
            n: 10,
            seed: 3,
        };
        c.task = SynthTask {
            max_len: 4,
            ..SynthTask::default()
        };
        c.run.strategy = strategy;
        c.run.epochs = 3;
        c.run.steps_per_epoch = 4;
        c.run.batch_size = 4;
        c.run.eval_examples = 16;
        c
    }

    #[test]
    fn full_ft_trains_everything_at_full_cost() {
        let r = train(&small(Strategy::FullFt)).unwrap().report;
        for e in &r.epochs {
            assert!(e.mask_forward_order.chars().all(|c| c == '1'));
            assert_eq!(e.max_step_flops, r.t_full);
            assert_eq!(e.evaluation_flops, 0);
        }
        assert_eq!(r.total_flops, r.full_ft_flops);
        assert_eq!(r.max_step_prediction_error, 0.0);
    }

    #[test]
    fn adaptive_steps_fit_the_budget() {
        for rho in [0.4, 0.5, 0.7] {
            let mut c = small(Strategy::Adaptive);
            c.selector.rho = rho;
            let r = train(&c).unwrap().report;
            assert_eq!(r.events.len(), 3);
            assert!(r.max_step_ratio <= rho, "rho {rho}: {}", r.max_step_ratio);
            assert_eq!(r.max_step_prediction_error, 0.0);
        }
    }

    #[test]
    fn static_reuses_the_first_plan() {
        let stat = train(&small(Strategy::StaticFirstEpoch)).unwrap().report;
        let adaptive = train(&small(Strategy::Adaptive)).unwrap().report;
        assert_eq!(stat.events.len(), 1);
        assert_eq!(stat.events[0].mask, adaptive.events[0].mask);
        let first = &stat.epochs[0].mask_forward_order;
        assert!(stat.epochs.iter().all(|e| &e.mask_forward_order == first));
    }

    #[test]
    fn eval_every_sets_the_event_cadence() {
        let mut c = small(Strategy::Adaptive);
        c.run.eval_every = Some(5);
        let r = train(&c).unwrap().report;
        let steps: Vec<usize> = r.events.iter().map(|e| e.step).collect();
        assert_eq!(steps, vec![0, 5, 10]);
    }

    #[test]
    fn fixed_top_k_is_a_fitting_prefix() {
        let c = small(Strategy::FixedTopK);
        let out = train(&c).unwrap();
        let profile = profile_flops(&out.graph, BatchShape { batch: 4, seq: 10 }).unwrap();
        let mask = fixed_top_k(&out.graph, &profile, 0.5, DyConvention::Inclusive);
        let slots: Vec<usize> = mask.selected().collect();
        let expected: Vec<usize> = (1..=slots.len()).collect();
        assert_eq!(slots, expected);
        assert!(selective_cost(&profile, &mask, DyConvention::Inclusive) as f64 <= 0.5 * profile.t_full as f64);
        assert!(out.report.max_step_ratio <= 0.5);
    }

    #[test]
    fn full_budget_matches_full_ft_when_importances_are_positive() {
        let mut c = small(Strategy::Adaptive);
        c.selector.rho = 1.0;
        let adaptive = train(&c).unwrap();
        let all_positive = adaptive
            .report
            .events
            .iter()
            .all(|e| e.importance.iter().all(|&v| v > 0.0));
        for e in &adaptive.report.events {
            if e.importance.iter().all(|&v| v > 0.0) {
                assert_eq!(e.mask.count(), e.mask.len(), "{:?} {}", e.importance, e.mask.forward_order_string());
            }
        }
        if all_positive {
            let full = train(&small(Strategy::FullFt)).unwrap();
            assert_eq!(adaptive.params, full.params);
            let losses = |r: &TrainReport| r.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>();
            assert_eq!(losses(&adaptive.report), losses(&full.report));
        }
    }

    #[test]
    fn one_full_step_lowers_the_loss() {
        let mut lower = 0;
        let seeds = 20;
        for seed in 0..seeds {
            let mut c = small(Strategy::FullFt);
            c.model.seed = seed;
            c.task.seed = seed;
            let (graph, params) = build_toy_decoder(&c.model).unwrap();
            let batch: Batch = c.task.batch(0, 8, c.model.vocab, c.model.n).into();
            let tape = forward(&graph, &params, &batch).unwrap();
            let before = tape.loss();
            let (grads, _) = backward_selective(&tape, &graph, &SelectionMask::full(graph.len()), DyConvention::Inclusive);
            drop(tape);
            let mut params = params;
            let mut opt = Optimizer::new(c.optimizer, &params);
            opt.step(&mut params, &grads, &SelectionMask::full(graph.len()));
            let after = forward(&graph, &params, &batch).unwrap().loss();
            lower += usize::from(after < before);
        }
        assert!(lower * 100 >= 95 * seeds as usize, "{lower}/{seeds}");
    }

    #[test]
    fn runs_are_deterministic() {
        let a = train(&small(Strategy::Adaptive)).unwrap();
        let b = train(&small(Strategy::Adaptive)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.report.total_flops, b.report.total_flops);
    }

    #[test]
    fn infeasible_budget_fails_at_startup() {
        let mut c = small(Strategy::Adaptive);
        c.selector.rho = 0.1;
        assert!(matches!(train(&c), Err(Error::InfeasibleBudget { .. })));
    }

    #[test]
    fn divergence_aborts_the_run() {
        let mut c = small(Strategy::FullFt);
        c.optimizer.lr = 1e300;
        c.run.lr_schedule = LrSchedule::Constant;
        assert!(matches!(train(&c), Err(Error::Diverged { .. })));
    }

    #[test]
    fn reports_are_written() {
        let r = train(&small(Strategy::Adaptive)).unwrap().report;
        let dir = tempfile::tempdir().unwrap();
        r.save(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let back: TrainReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.epochs.len(), 3);
        let csv = std::fs::read_to_string(dir.path().join("epochs.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }
}
