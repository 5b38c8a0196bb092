use adaptive_bp::graph::DyConvention;
use adaptive_bp::importance::ImportanceVector;
use adaptive_bp::profiler::{selective_cost, BatchShape, FlopsProfile};
use adaptive_bp::selector::{brute_force_select, dp_select, quantize, SelectOptions};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Instance {
    profile: FlopsProfile,
    importance: ImportanceVector,
    rho: f64,
}

/// Random integer costs and importances on a 1/1024 grid, so that sums of
/// importance are exact and DP and brute force can be compared with `==`.
fn instance(max_n: usize) -> impl Strategy<Value = Instance> {
    (1..=max_n)
        .prop_flat_map(|n| {
            (
                proptest::collection::vec(0u64..40, n),
                proptest::collection::vec(0u64..40, n),
                proptest::collection::vec(-256i32..=1024, n),
                1u64..60,
                0.05f64..=1.0,
                proptest::bool::weighted(0.3),
            )
        })
        .prop_map(|(dy, dw, imp, t_fp, rho, tied)| {
            let tied = if tied { vec![0] } else { vec![] };
            let profile = FlopsProfile::new(BatchShape { batch: 1, seq: 1 }, dy, dw, t_fp, tied).unwrap();
            let raw: Vec<f64> = imp.iter().map(|&v| v as f64 / 1024.0).collect();
            let mut importance = ImportanceVector::from_raw(raw.clone());
            // Keep the grid values themselves rather than rescaled ones.
            importance.values = raw;
            Instance { profile, importance, rho }
        })
        .prop_filter("budget must cover the forward pass", |i| {
            i.rho * i.profile.t_full as f64 >= i.profile.t_fp as f64
        })
}

fn convention() -> impl Strategy<Value = DyConvention> {
    prop_oneof![Just(DyConvention::Inclusive), Just(DyConvention::Exclusive)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dp_matches_brute_force_at_full_resolution(inst in instance(15), conv in convention()) {
        let qp = quantize(&inst.profile, inst.profile.t_full).unwrap();
        let opts = SelectOptions { convention: conv, prune: true };
        let dp = dp_select(&inst.importance, &inst.profile, &qp, inst.rho, opts).unwrap();
        let bf = brute_force_select(&inst.importance, &inst.profile, inst.rho, conv).unwrap();
        prop_assert_eq!(dp.cumulative_importance, bf.cumulative_importance);
        prop_assert!(dp.repaired.is_empty());
        prop_assert!(dp.feasible);
        prop_assert!(selective_cost(&inst.profile, &dp.mask, conv) as f64 <= inst.rho * inst.profile.t_full as f64);
    }

    #[test]
    fn pruning_does_not_change_the_plan(inst in instance(15), conv in convention(), t_q in 1u64..400) {
        let qp = quantize(&inst.profile, t_q).unwrap();
        let pruned = dp_select(&inst.importance, &inst.profile, &qp, inst.rho, SelectOptions { convention: conv, prune: true }).unwrap();
        let full = dp_select(&inst.importance, &inst.profile, &qp, inst.rho, SelectOptions { convention: conv, prune: false }).unwrap();
        prop_assert_eq!(&pruned.mask, &full.mask);
        prop_assert_eq!(pruned.dp_importance, full.dp_importance);
        prop_assert!(pruned.subproblems_solved <= full.subproblems_solved);
    }

    #[test]
    fn every_plan_fits_the_real_budget(inst in instance(15), conv in convention(), t_q in 1u64..400) {
        let qp = quantize(&inst.profile, t_q).unwrap();
        let plan = dp_select(&inst.importance, &inst.profile, &qp, inst.rho, SelectOptions { convention: conv, prune: true }).unwrap();
        prop_assert!(plan.feasible);
        prop_assert!(plan.predicted_flops as f64 <= inst.rho * inst.profile.t_full as f64);
        prop_assert_eq!(plan.predicted_flops, selective_cost(&inst.profile, &plan.mask, conv));
    }

    #[test]
    fn quantization_loses_at_most_the_floor_slack(inst in instance(12), t_q in 1u64..400) {
        // Any plan whose scaled real cost leaves N units of headroom is
        // representable, so the DP's optimum is at least as good.
        let conv = DyConvention::Inclusive;
        let p = &inst.profile;
        let qp = quantize(p, t_q).unwrap();
        let dp = dp_select(&inst.importance, p, &qp, inst.rho, SelectOptions::default()).unwrap();
        let budget = ((inst.rho * p.t_full as f64 - p.t_fp as f64) * qp.z).floor();
        let shrunk = budget - p.len() as f64;
        let mut best = 0.0f64;
        for bits in 0u32..(1 << p.len()) {
            let mask = adaptive_bp::graph::SelectionMask::new((0..p.len()).map(|i| bits >> i & 1 == 1).collect());
            if p.backprop_cost(&mask, conv) as f64 * qp.z <= shrunk {
                best = best.max(adaptive_bp::selector::cumulative_importance(&inst.importance, &mask));
            }
        }
        prop_assert!(dp.dp_importance >= best, "dp {} < shrunken optimum {}", dp.dp_importance, best);
    }

    #[test]
    fn importance_is_monotone_in_rho(inst in instance(12), conv in convention(), bump in 0.0f64..0.5) {
        let qp = quantize(&inst.profile, inst.profile.t_full).unwrap();
        let opts = SelectOptions { convention: conv, prune: true };
        let lo = dp_select(&inst.importance, &inst.profile, &qp, inst.rho, opts).unwrap();
        let hi = dp_select(&inst.importance, &inst.profile, &qp, (inst.rho + bump).min(1.0), opts).unwrap();
        prop_assert!(hi.cumulative_importance >= lo.cumulative_importance);
    }
}
