use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qaprune::gates::GateMask;
use qaprune::model::{
    build_model, count_flops, count_params, evaluate, feed_forward_sublayer, Activation, Model, QaExample,
    TransformerConfig,
};
use qaprune::surgery::prune_feedforward;
use qaprune::tensor::{Graph, Tensor};
use qaprune::Error;

fn toy_config() -> TransformerConfig {
    TransformerConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 32,
        d_ff: 64,
        vocab_size: 64,
        max_seq_len: 16,
        activation: Activation::Gelu,
    }
}

/// Scales every weight up so that slices matter to the logits.
fn loud_model(seed: u64) -> Model {
    let mut m = build_model(&toy_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in m.tensors_mut() {
        for v in t.data_mut() {
            *v = *v * 40.0 + rng.random_range(-0.1..0.1);
        }
    }
    m
}

fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

#[test]
fn parameter_count_closed_form() {
    let m = build_model(&toy_config(), 0).unwrap();
    let (v, s, e, f, l) = (64, 16, 32, 64, 2);
    let embeddings = v * e + s * e + 2 * e;
    let attention = 3 * (e * e + e) + (e * e + e) + 2 * e;
    let feed_forward = (e * f + f) + (f * e + e) + 2 * e;
    let head = 2 * e + 2;
    assert_eq!(count_params(&m), embeddings + l * (attention + feed_forward) + head);
}

#[test]
fn all_ones_mask_is_bit_identical() {
    let m = loud_model(1);
    let t = tokens(3 * 10, 64, 2);
    let mask = GateMask::ones(&m.sizes());
    let plain = m.logits(&t, 3, 10, None).unwrap();
    let gated = m.logits(&t, 3, 10, Some((&mask.attn, &mask.ff))).unwrap();
    assert_eq!(plain, gated);
}

#[test]
fn zeroed_head_matches_zeroed_value_slice() {
    let m = loud_model(3);
    let t = tokens(2 * 12, 64, 4);
    let (layer, head, hd) = (1, 2, m.head_dim());
    let mut mask = GateMask::ones(&m.sizes());
    mask.attn[layer][head] = 0.0;
    let gated = m.logits(&t, 2, 12, Some((&mask.attn, &mask.ff))).unwrap();

    let mut zeroed = m.clone();
    let lw = &mut zeroed.layers[layer];
    let d = m.config.d_model;
    for c in head * hd..(head + 1) * hd {
        for r in 0..d {
            lw.value.data_mut()[r * d + c] = 0.0;
        }
        lw.value_bias.data_mut()[c] = 0.0;
        for k in 0..d {
            lw.attn_out.data_mut()[c * d + k] = 0.0;
        }
    }
    let reference = zeroed.logits(&t, 2, 12, None).unwrap();
    let diff = gated.max_abs_diff(&reference).unwrap();
    assert!(diff <= 1e-6, "{diff}");
    assert!(gated.max_abs_diff(&m.logits(&t, 2, 12, None).unwrap()).unwrap() > 1e-3);
}

#[test]
fn zeroed_ff_layer_leaves_only_the_bias_path() {
    let m = loud_model(5);
    let t = tokens(2 * 9, 64, 6);
    let mut mask = GateMask::ones(&m.sizes());
    mask.ff[0].iter_mut().for_each(|v| *v = 0.0);
    let gated = m.logits(&t, 2, 9, Some((&mask.attn, &mask.ff))).unwrap();
    let mut zeroed = m.clone();
    zeroed.layers[0].ff_out.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let diff = gated.max_abs_diff(&zeroed.logits(&t, 2, 9, None).unwrap()).unwrap();
    assert!(diff <= 1e-6, "{diff}");
}

#[test]
fn permuting_heads_leaves_logits_unchanged() {
    let m = loud_model(7);
    let t = tokens(2 * 11, 64, 8);
    let (hd, d) = (m.head_dim(), m.config.d_model);
    let order = [2, 0, 3, 1];
    let cols: Vec<usize> = order.iter().flat_map(|&h| h * hd..(h + 1) * hd).collect();
    let mut p = m.clone();
    for lw in &mut p.layers {
        lw.query = lw.query.select_columns(&cols).unwrap();
        lw.query_bias = lw.query_bias.select_rows(&cols).unwrap();
        lw.key = lw.key.select_columns(&cols).unwrap();
        lw.key_bias = lw.key_bias.select_rows(&cols).unwrap();
        lw.value = lw.value.select_columns(&cols).unwrap();
        lw.value_bias = lw.value_bias.select_rows(&cols).unwrap();
        lw.attn_out = lw.attn_out.select_rows(&cols).unwrap();
    }
    assert_eq!(p.layers[0].query.shape(), &[d, d]);
    let reference = m.logits(&t, 2, 11, None).unwrap();
    let scale = reference.data().iter().fold(1.0f32, |a, v| a.max(v.abs()));
    let diff = reference.max_abs_diff(&p.logits(&t, 2, 11, None).unwrap()).unwrap();
    assert!(diff <= 1e-6 * scale, "{diff} at scale {scale}");
}

#[test]
fn ff_sublayer_is_linear_in_its_gate() {
    let m = loud_model(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x: Vec<f32> = (0..3 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let out = |gamma: f32| {
        let mut g: Graph = Graph::new();
        let mv = m.bind(&mut g, false).unwrap();
        let xv = g.constant(Tensor::matrix(3, 32, x.clone()).unwrap()).unwrap();
        let mut gate = vec![1.0; 64];
        gate[17] = gamma;
        let gv = g.constant(Tensor::vector(gate)).unwrap();
        let y = feed_forward_sublayer(&mut g, &mv.layers[0], xv, Activation::Gelu, Some(gv), 0).unwrap();
        g.value(y).clone()
    };
    let (a, b, mid) = (out(0.0), out(1.0), out(0.5));
    for ((x0, x1), xm) in a.data().iter().zip(b.data()).zip(mid.data()) {
        assert!((0.5 * (x0 + x1) - xm).abs() <= 1e-4 * (1.0 + xm.abs()));
    }
}

#[test]
fn halving_ff_units_halves_the_ff_flop_term() {
    let m = build_model(&toy_config(), 0).unwrap();
    let mut mask = GateMask::ones(&m.sizes());
    for layer in &mut mask.ff {
        for v in layer.iter_mut().skip(1).step_by(2) {
            *v = 0.0;
        }
    }
    let half = prune_feedforward(&m, &mask.ff).unwrap();
    let (full, cut) = (count_flops(&m, 16, 3), count_flops(&half, 16, 3));
    assert_eq!(cut.feed_forward * 2, full.feed_forward);
    assert_eq!(cut.attention, full.attention);
    let ff_params = |m: &Model| m.layers.iter().map(|l| l.ff_in.len() + l.ff_in_bias.len() + l.ff_out.len()).sum::<usize>();
    assert_eq!(ff_params(&half) * 2, ff_params(&m));
}

#[test]
fn untrained_start_accuracy_is_chance() {
    let cfg = TransformerConfig {
        max_seq_len: 32,
        ..toy_config()
    };
    let m = build_model(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 2000;
    let data: Vec<QaExample> = (0..n)
        .map(|_| {
            let start = rng.random_range(0..32);
            QaExample {
                tokens: (0..32).map(|_| rng.random_range(0..64)).collect(),
                start,
                end: rng.random_range(start..32),
            }
        })
        .collect();
    let acc = evaluate(&m, &data, None).unwrap().start_acc;
    let p = 1.0 / 32.0;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((acc - p).abs() <= 3.0 * sigma, "{acc}");
}

#[test]
fn constant_logits_predict_position_zero() {
    let mut m = build_model(&toy_config(), 13).unwrap();
    m.qa_weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let data: Vec<QaExample> = (0..20)
        .map(|i| QaExample {
            tokens: tokens(10, 64, i),
            start: 0,
            end: 0,
        })
        .collect();
    let metrics = evaluate(&m, &data, None).unwrap();
    assert_eq!(metrics.span_exact_match, 1.0);

    let doubled: Vec<QaExample> = data.iter().chain(&data).cloned().collect();
    let again = evaluate(&m, &doubled, None).unwrap();
    assert_eq!(
        (again.span_exact_match, again.start_acc, again.end_acc),
        (metrics.span_exact_match, metrics.start_acc, metrics.end_acc)
    );
    assert!((again.mean_loss - metrics.mean_loss).abs() <= 1e-12);
    assert!(matches!(evaluate(&m, &[], None), Err(Error::Contract(_))));
}
