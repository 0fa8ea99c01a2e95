//! Property tests for the nesting structure: the first k visual tokens at any
//! budget m ≥ k are bit-identical to the k-token encoding, and training at a
//! budget touches only the shared prefix of the single parameter store.

use proptest::prelude::*;

use mqt_core::qt::{encode_image, GridFeatures, LatentQueryBank, QTParams, QtConfig, QtOrdering};
use mqt_core::rng::{rng_for, stream};
use mqt_core::tensor::Tensor;

fn cfg() -> QtConfig {
    QtConfig {
        max_tokens: 16,
        d_v: 8,
        d_q: 8,
        d_lm: 12,
        heads: 2,
        ordering: QtOrdering::AttentionThenProjection,
        query_self_attention: false,
    }
}

fn setup(seed: u64) -> (QTParams, LatentQueryBank, GridFeatures) {
    let c = cfg();
    let params = QTParams::init(c, seed).unwrap();
    let bank = LatentQueryBank::init(c.max_tokens, c.d_q, seed ^ 0xABCD).unwrap();
    let feats = Tensor::randn(vec![9, c.d_v], 1.0, &mut rng_for(seed, stream::EVAL_DATA, 3));
    let grid = GridFeatures::new(feats, 3, 3).unwrap();
    (params, bank, grid)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prefix_tokens_are_bit_identical(seed in 0u64..1000, k in 1usize..16, m in 1usize..16) {
        prop_assume!(k <= m);
        let (params, bank, grid) = setup(seed);
        let big = encode_image(&grid, &bank, m, &params).unwrap();
        let small = encode_image(&grid, &bank, k, &params).unwrap();
        let d = cfg().d_lm;
        prop_assert_eq!(small.tokens.data(), &big.tokens.data()[..k * d]);
    }

    #[test]
    fn encodings_are_deterministic(seed in 0u64..1000, m in 1usize..16) {
        let (params, bank, grid) = setup(seed);
        let a = encode_image(&grid, &bank, m, &params).unwrap();
        let b = encode_image(&grid, &bank, m, &params).unwrap();
        prop_assert_eq!(a.tokens.data(), b.tokens.data());
    }

    #[test]
    fn attention_rows_are_probability_distributions(seed in 0u64..1000, m in 1usize..16) {
        let (params, bank, grid) = setup(seed);
        let map = mqt_core::qt::export_attention(&grid, &bank, m, &params).unwrap();
        for row in map.weights.chunks_exact(map.cells) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&w| w >= 0.0));
        }
    }
}

#[test]
fn there_is_exactly_one_parameter_store_for_the_bank() {
    // training at budget m must leave rows past m bit-identical, and the
    // trained prefix must be shared by every budget that includes it
    use mqt_core::optim::{AdamParams, AdamState};
    use mqt_core::tasks::{generate_dataset, TaskKind, TaskSpec};
    use mqt_core::train::step_at_budgets;
    use mqt_core::vlm::{Model, ModelConfig, TrainScope};

    let cfg = ModelConfig::reduced();
    let mut model = Model::init(cfg, 3).unwrap();
    let mut spec = TaskSpec::new(TaskKind::DetailLocate, 3);
    spec.image_size = cfg.image_size;
    spec.answer_classes = cfg.answer_classes;
    let batch = generate_dataset(&spec, stream::TRAIN_DATA, 0, 2);

    let before = model.bank.queries().data().to_vec();
    let m = 3;
    let mut state = AdamState::new();
    step_at_budgets(
        &mut model,
        &batch,
        &[(m, 1.0)],
        TrainScope::All,
        &mut state,
        &AdamParams::with_lr(1e-3),
    )
    .unwrap();
    let after = model.bank.queries().data();
    let d = cfg.d_q;
    assert_ne!(&before[..m * d], &after[..m * d], "prefix should train");
    assert_eq!(&before[m * d..], &after[m * d..], "tail must stay untouched");
}
