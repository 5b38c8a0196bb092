use adaptive_bp::autodiff::{backward_full, backward_selective};
use adaptive_bp::graph::{DyConvention, SelectionMask};
use adaptive_bp::model::{build_toy_decoder, forward, ToyModelConfig};
use adaptive_bp::profiler::{profile_flops, selective_cost, verify_against_meter, BatchShape};
use adaptive_bp::synth::SynthTask;
use proptest::prelude::*;

fn config(blocks: usize, d: usize, h: usize) -> ToyModelConfig {
    ToyModelConfig {
        blocks,
        d,
        h,
        ffn_width: 2 * d,
        vocab: 13,
        n: 10,
        seed: 5,
    }
}

fn task() -> SynthTask {
    SynthTask {
        max_len: 4,
        ..SynthTask::default()
    }
}

#[test]
fn full_backward_matches_profile_exactly() {
    for (blocks, d, h) in [(1, 4, 1), (2, 8, 2), (3, 12, 3)] {
        let cfg = config(blocks, d, h);
        let (graph, params) = build_toy_decoder(&cfg).unwrap();
        let batch = task().batch(0, 3, cfg.vocab, cfg.n);
        let tape = forward(&graph, &params, &batch.into()).unwrap();
        let profile = profile_flops(&graph, BatchShape { batch: 3, seq: cfg.n }).unwrap();
        assert_eq!(tape.fp_flops(), profile.t_fp);
        let (_, meter) = backward_full(&tape);
        for slot in 0..graph.len() {
            assert_eq!(meter.dy[slot], profile.t_dy[slot], "dy {}", graph.tensors[slot].name);
            assert_eq!(meter.dw[slot], profile.t_dw[slot], "dw {}", graph.tensors[slot].name);
        }
        assert_eq!(meter.total(), profile.t_full);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inclusive_selective_meter_equals_prediction(bits in proptest::collection::vec(proptest::bool::weighted(0.15), 35)) {
        let cfg = ToyModelConfig { vocab: 13, n: 10, ..config(2, 8, 2) };
        let (graph, params) = build_toy_decoder(&cfg).unwrap();
        let batch = task().batch(7, 2, cfg.vocab, cfg.n);
        let tape = forward(&graph, &params, &batch.into()).unwrap();
        let profile = profile_flops(&graph, BatchShape { batch: 2, seq: cfg.n }).unwrap();
        let mask = SelectionMask::new(bits);
        let (_, meter) = backward_selective(&tape, &graph, &mask, DyConvention::Inclusive);
        let report = verify_against_meter(&profile, &mask, DyConvention::Inclusive, &meter, 0.0).unwrap();
        prop_assert!(report.flagged.is_empty(), "{:?}", report.flagged);
        prop_assert_eq!(meter.total(), selective_cost(&profile, &mask, DyConvention::Inclusive));
    }
}
