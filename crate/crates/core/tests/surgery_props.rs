use proptest::prelude::*;

use qaprune::gates::{apply_guard, GateFamily, GateMask, ImportanceScores};
use qaprune::model::{build_model, Activation, Model, TransformerConfig};
use qaprune::surgery::{prune, prune_attention, prune_feedforward, round_sizes, verify_equivalence};

fn model(seed: u64) -> Model {
    let cfg = TransformerConfig {
        n_layers: 3,
        n_heads: 4,
        d_model: 16,
        d_ff: 24,
        vocab_size: 20,
        max_seq_len: 10,
        activation: Activation::Gelu,
    };
    build_model(&cfg, seed).unwrap()
}

fn mask_strategy() -> impl Strategy<Value = GateMask> {
    let family = |n: usize| prop::collection::vec(prop::collection::vec(prop::bool::weighted(0.6), n), 3);
    (family(4), family(24)).prop_map(|(a, f)| {
        let to_f32 = |v: Vec<Vec<bool>>| -> Vec<Vec<f32>> {
            v.into_iter().map(|l| l.into_iter().map(|b| f32::from(u8::from(b))).collect()).collect()
        };
        let (mut attn, mut ff) = (to_f32(a), to_f32(f));
        let flat = |m: &[Vec<f32>]| -> Vec<Vec<f32>> { m.iter().map(|l| vec![1.0; l.len()]).collect() };
        let (sa, sf) = (flat(&attn), flat(&ff));
        let mut forced = apply_guard(GateFamily::Attention, &mut attn, &sa);
        forced.extend(apply_guard(GateFamily::FeedForward, &mut ff, &sf));
        GateMask { attn, ff, forced }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pruned_model_matches_gated_model(mask in mask_strategy(), seed in 0u64..1000) {
        let m = model(seed);
        let p = prune(&m, &mask).unwrap();
        prop_assert_eq!(p.sizes(), mask.kept_sizes());
        let diff = verify_equivalence(&m, &mask, &p, 4, seed).unwrap();
        prop_assert!(diff <= 1e-5, "{}", diff);
    }

    #[test]
    fn families_commute_and_pruning_is_idempotent(mask in mask_strategy(), seed in 0u64..1000) {
        let m = model(seed);
        let a = prune_feedforward(&prune_attention(&m, &mask.attn).unwrap(), &mask.ff).unwrap();
        let b = prune_attention(&prune_feedforward(&m, &mask.ff).unwrap(), &mask.attn).unwrap();
        prop_assert_eq!(&a, &b);
        let again = prune(&a, &GateMask::ones(&a.sizes())).unwrap();
        prop_assert_eq!(a, again);
    }
}

#[test]
fn removing_one_of_four_heads_keeps_three_quarters() {
    let m = model(0);
    let mut mask = GateMask::ones(&m.sizes());
    mask.attn[1][2] = 0.0;
    let p = prune(&m, &mask).unwrap();
    assert_eq!(p.layers[1].attention_params() * 4, m.layers[1].attention_params() * 3);
    assert_eq!(p.layers[0].attention_params(), m.layers[0].attention_params());
}

#[test]
fn corrupted_weight_is_detected() {
    let m = model(3);
    let mut mask = GateMask::ones(&m.sizes());
    mask.attn[0][0] = 0.0;
    mask.ff[2][5] = 0.0;
    let mut p = prune(&m, &mask).unwrap();
    assert!(verify_equivalence(&m, &mask, &p, 4, 0).unwrap() <= 1e-5);
    p.layers[2].ff_out.data_mut()[0] += 1.0;
    assert!(verify_equivalence(&m, &mask, &p, 4, 0).unwrap() > 1e-3);
}

#[test]
fn multiple_of_granularity_is_left_alone() {
    let mut ff = vec![0.0; 64];
    ff[..16].iter_mut().for_each(|v| *v = 1.0);
    let mask = GateMask {
        attn: vec![vec![1.0; 4]],
        ff: vec![ff],
        forced: Vec::new(),
    };
    let scores = ImportanceScores {
        attn: vec![vec![0.0; 4]],
        ff: vec![(0..64).map(|i| i as f32).collect()],
    };
    let (rounded, change) = round_sizes(&mask, 8, &scores).unwrap();
    assert_eq!(rounded, mask);
    assert_eq!(change.ff, 0.0);
}
