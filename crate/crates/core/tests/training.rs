use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qaprune::data::{generate_synthetic_task, SyntheticTaskConfig};
use qaprune::model::{build_model, forward, qa_loss, Activation, GateVars, Model, QaBatch, QaExample, TransformerConfig};
use qaprune::tensor::{Graph, Tensor};
use qaprune::train::{distill, distillation_loss, retrain, train_task, TrainConfig};
use qaprune::Error;

fn config() -> TransformerConfig {
    TransformerConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 16,
        vocab_size: 32,
        max_seq_len: 16,
        activation: Activation::Gelu,
    }
}

fn data(n: usize) -> Vec<QaExample> {
    generate_synthetic_task(&SyntheticTaskConfig {
        seq_len: 16,
        n_train: n,
        n_dev: 4,
        ..Default::default()
    })
    .unwrap()
    .train
}

/// Loss values of `distillation_loss` for the model's own logits against
/// `teacher`, one per `(temperature, alpha)`.
fn soft_losses(model: &Model, batch: &QaBatch, teacher: &Tensor, settings: &[(f32, f32)]) -> Vec<f32> {
    settings
        .iter()
        .map(|&(t, a)| {
            let mut g: Graph = Graph::new();
            let mv = model.bind(&mut g, false).unwrap();
            let logits = forward(&mut g, &mv, &batch.token_ids, batch.batch, batch.seq, &GateVars::none(1)).unwrap();
            let l = distillation_loss(&mut g, &logits, teacher, &batch.start_targets, &batch.end_targets, t, a).unwrap();
            g.value(l).data()[0]
        })
        .collect()
}

fn hard_loss(model: &Model, batch: &QaBatch) -> f32 {
    let mut g: Graph = Graph::new();
    let mv = model.bind(&mut g, false).unwrap();
    let logits = forward(&mut g, &mv, &batch.token_ids, batch.batch, batch.seq, &GateVars::none(1)).unwrap();
    let l = qa_loss(&mut g, &logits, &batch.start_targets, &batch.end_targets).unwrap();
    g.value(l).data()[0]
}

#[test]
fn distillation_loss_limits() {
    let model = build_model(&config(), 2).unwrap();
    let examples = data(6);
    let batch = QaBatch::from_examples(&examples).unwrap();
    let own = model.logits(&batch.token_ids, batch.batch, batch.seq, None).unwrap();

    let same = soft_losses(&model, &batch, &own, &[(2.0, 1.0)]);
    assert!(same[0].abs() < 1e-5, "{same:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shift: Vec<f32> = (0..own.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
    let teacher = Tensor::new(own.shape().to_vec(), own.data().iter().zip(&shift).map(|(a, b)| a + b).collect()).unwrap();
    let v = soft_losses(&model, &batch, &teacher, &[(2.0, 0.0), (2.0, 1.0), (2.0, 0.5)]);
    assert!((v[0] - hard_loss(&model, &batch)).abs() <= 1e-6);
    assert!((v[2] - 0.5 * (v[0] + v[1])).abs() <= 1e-5 * (1.0 + v[2].abs()));

    // at high temperature T²·KL tends to half the variance of the logit gap
    let (b, s) = (batch.batch, batch.seq);
    let mut expected = 0.0f64;
    for row in 0..b {
        for col in 0..2 {
            let gap: Vec<f64> = (0..s).map(|i| f64::from(shift[(row * s + i) * 2 + col])).collect();
            let mean = gap.iter().sum::<f64>() / s as f64;
            expected += 0.5 * gap.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / s as f64;
        }
    }
    expected /= (2 * b) as f64;
    let hot = f64::from(soft_losses(&model, &batch, &teacher, &[(20.0, 1.0)])[0]);
    assert!((hot - expected).abs() <= 0.05 * expected, "{hot} vs {expected}");
}

#[test]
fn pure_hard_distillation_equals_retraining() {
    let student = build_model(&config(), 4).unwrap();
    let teacher = build_model(&config(), 5).unwrap();
    let teacher_copy = teacher.clone();
    let examples = data(40);
    let cfg = TrainConfig {
        epochs: 1.0,
        batch_size: 8,
        distill_alpha: 0.0,
        ..Default::default()
    };
    let a = retrain(&student, &examples, &cfg).unwrap();
    let b = distill(&student, &teacher, &examples, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.history, b.history);
    assert_eq!(teacher, teacher_copy);
}

#[test]
fn zero_epochs_leave_the_model_alone() {
    let m = build_model(&config(), 6).unwrap();
    let out = train_task(
        &m,
        &data(10),
        &TrainConfig {
            epochs: 0.0,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(out.model, m);
    assert!(out.history.is_empty());
}

#[test]
fn training_lowers_the_loss() {
    let m = build_model(&config(), 7).unwrap();
    let out = train_task(
        &m,
        &data(200),
        &TrainConfig {
            epochs: 4.0,
            batch_size: 16,
            ..Default::default()
        },
    )
    .unwrap();
    let means = &out.epoch_means;
    assert_eq!(means.len(), 4);
    assert!(means[3] < means[0], "{means:?}");
}

#[test]
fn mismatched_teacher_is_rejected() {
    let student = build_model(&config(), 8).unwrap();
    let teacher = build_model(
        &TransformerConfig {
            vocab_size: 40,
            ..config()
        },
        9,
    )
    .unwrap();
    let err = distill(&student, &teacher, &data(8), &TrainConfig::default());
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn frozen_model_cannot_be_trained() {
    let m = build_model(&config(), 10).unwrap().frozen();
    assert!(matches!(train_task(&m, &data(8), &TrainConfig::default()), Err(Error::Contract(_))));
}
