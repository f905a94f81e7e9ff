use proptest::prelude::*;

use qaprune::data::{generate_synthetic_task, SyntheticTaskConfig};
use qaprune::gates::{
    finalize_gates, gain_scores, random_gates, train_gates_l0, GainConfig, GateFamily, GateObjective,
    GateTrainConfig, HardConcreteGates, HardConcreteParams, PenaltyKind, PenaltyWeights,
};
use qaprune::model::{build_model, Activation, LayerSizes, Model, QaExample, TransformerConfig};
use qaprune::Error;

fn setup() -> (Model, Vec<QaExample>) {
    let task = generate_synthetic_task(&SyntheticTaskConfig {
        seq_len: 16,
        n_train: 48,
        n_dev: 8,
        ..Default::default()
    })
    .unwrap();
    let cfg = TransformerConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 16,
        vocab_size: 32,
        max_seq_len: 16,
        activation: Activation::Gelu,
    };
    (build_model(&cfg, 1).unwrap().frozen(), task.train)
}

fn quick(seed: u64) -> GateTrainConfig {
    GateTrainConfig {
        batch_size: 16,
        epochs: 2.0,
        seed,
        ..Default::default()
    }
}

#[test]
fn random_half_keeps_half_of_ten_thousand() {
    let sizes = LayerSizes {
        heads: vec![1000; 5],
        ff: vec![1000; 5],
    };
    let mask = random_gates(&sizes, 0.5, 17).unwrap();
    for family in [GateFamily::Attention, GateFamily::FeedForward] {
        let kept = mask.retained_fraction(family);
        assert!((kept - 0.5).abs() <= 0.02, "{kept}");
    }
}

#[test]
fn probability_one_is_half_at_beta_ln_eleven() {
    let p = HardConcreteParams::default();
    let la = p.beta * 11f32.ln();
    assert!((PenaltyKind::ExactOne.probability(la, &p) - 0.5).abs() < 1e-6);
}

#[test]
fn zeroed_head_has_zero_gain() {
    let (mut model, data) = setup();
    let hd = model.head_dim();
    let d = model.config.d_model;
    let lw = &mut model.layers[1];
    for c in 0..hd {
        for r in 0..d {
            lw.value.data_mut()[r * d + c] = 0.0;
        }
        lw.value_bias.data_mut()[c] = 0.0;
    }
    let scores = gain_scores(&model, &data[..10], GainConfig::default()).unwrap();
    assert_eq!(scores.attn[1][0], 0.0);
    assert!(scores.attn[1][1] > 0.0);
}

#[test]
fn gain_ignores_duplication_and_order() {
    let (model, data) = setup();
    let data = &data[..12];
    let base = gain_scores(&model, data, GainConfig::default()).unwrap();
    let doubled: Vec<QaExample> = data.iter().chain(data).cloned().collect();
    let reversed: Vec<QaExample> = data.iter().rev().cloned().collect();
    for other in [&doubled, &reversed] {
        let s = gain_scores(&model, other, GainConfig::default()).unwrap();
        for (a, b) in base.attn.iter().chain(&base.ff).flatten().zip(s.attn.iter().chain(&s.ff).flatten()) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn zero_penalty_keeps_nearly_everything() {
    let (model, data) = setup();
    let weights = PenaltyWeights {
        lambda_attn: 1e-9,
        lambda_ff: 1e-9,
    };
    let pair = train_gates_l0(&model, &data, &weights, GateObjective::CrossEntropy, &quick(0)).unwrap();
    let mask = pair.mask(0.5);
    for family in [GateFamily::Attention, GateFamily::FeedForward] {
        assert!(mask.retained_fraction(family) >= 0.95);
    }
}

#[test]
fn huge_penalty_leaves_only_guarded_units() {
    let (model, data) = setup();
    let weights = PenaltyWeights {
        lambda_attn: 1e6,
        lambda_ff: 1e6,
    };
    let long = GateTrainConfig {
        epochs: 15.0,
        ..quick(0)
    };
    let pair = train_gates_l0(&model, &data, &weights, GateObjective::CrossEntropy, &long).unwrap();
    let mask = pair.mask(0.5);
    for family in [GateFamily::Attention, GateFamily::FeedForward] {
        for l in 0..2 {
            assert_eq!(mask.kept(family, l).len(), 1);
        }
    }
    assert_eq!(mask.forced.len(), 4);
}

#[test]
fn gate_training_is_reproducible() {
    let (model, data) = setup();
    let weights = PenaltyWeights {
        lambda_attn: 0.05,
        lambda_ff: 0.01,
    };
    let a = train_gates_l0(&model, &data, &weights, GateObjective::CrossEntropy, &quick(4)).unwrap();
    let b = train_gates_l0(&model, &data, &weights, GateObjective::CrossEntropy, &quick(4)).unwrap();
    assert_eq!(a, b);
    let c = train_gates_l0(&model, &data, &weights, GateObjective::CrossEntropy, &quick(5)).unwrap();
    assert_ne!(a.attn.log_alpha, c.attn.log_alpha);
}

#[test]
fn gate_training_needs_a_frozen_model() {
    let (model, data) = setup();
    let weights = PenaltyWeights {
        lambda_attn: 0.1,
        lambda_ff: 0.1,
    };
    let err = train_gates_l0(&model.unfrozen(), &data, &weights, GateObjective::CrossEntropy, &quick(0));
    assert!(matches!(err, Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn penalty_probability_increases_with_log_alpha(la in -8.0f32..8.0) {
        let p = HardConcreteParams::default();
        for kind in [PenaltyKind::ExactOne, PenaltyKind::NonZero] {
            let h = 1e-2;
            let slope = (kind.probability(la + h, &p) - kind.probability(la - h, &p)) / (2.0 * h);
            prop_assert!(slope > 0.0);
        }
    }

    #[test]
    fn finalized_gates_ignore_positive_scaling(
        la in prop::collection::vec(prop::collection::vec(-6.0f32..6.0, 8), 3),
        scale in 0.1f32..10.0,
    ) {
        let la: Vec<Vec<f32>> = la
            .into_iter()
            .map(|l| l.into_iter().map(|v| if v.abs() < 1e-3 { 1.0 } else { v }).collect())
            .collect();
        let mut gates = HardConcreteGates::new(GateFamily::FeedForward, &[8, 8, 8], 0.0, HardConcreteParams::default());
        gates.log_alpha = la.clone();
        let (a, fa) = finalize_gates(&gates, 0.5);
        gates.log_alpha = la.iter().map(|l| l.iter().map(|v| v * scale).collect()).collect();
        let (b, fb) = finalize_gates(&gates, 0.5);
        prop_assert_eq!(a, b);
        prop_assert_eq!(fa, fb);
    }
}
