use proptest::prelude::*;
use qaprune::tensor::{finite_difference_check, Graph, Tensor, Var};
use qaprune::Result;

fn approx(a: &[f32], b: &[f32], tol: f32) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

/// Standard normal CDF by composite Simpson integration of the density.
fn normal_cdf(x: f64) -> f64 {
    let n = 2000;
    let h = x / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let inner: f64 = (1..n).map(|i| pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    0.5 + h / 3.0 * (pdf(0.0) + inner + pdf(x))
}

#[test]
fn matmul_by_hand() {
    let mut g: Graph = Graph::new();
    let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let b = g.constant(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap()).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[17.0, 39.0]);
}

#[test]
fn gelu_at_one_matches_gaussian_cdf() {
    let oracle = normal_cdf(1.0);
    assert!((oracle - 0.8413).abs() < 1e-4);
    let mut g: Graph = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 1.0])).unwrap();
    let y = g.gelu(x).unwrap();
    assert_eq!(g.value(y).data()[0], 0.0);
    assert!((f64::from(g.value(y).data()[1]) - oracle).abs() < 1e-3);
}

#[test]
fn softmax_of_zero_and_ln3() {
    let mut g: Graph = Graph::new();
    let x = g.constant(Tensor::matrix(1, 2, vec![0.0, 3f32.ln()]).unwrap()).unwrap();
    let y = g.softmax(x).unwrap();
    approx(g.value(y).data(), &[0.25, 0.75], 1e-6);
}

#[test]
fn layer_norm_of_one_and_three() {
    let mut g: Graph = Graph::new();
    let x = g.constant(Tensor::matrix(2, 2, vec![1.0, 3.0, 5.0, 5.0]).unwrap()).unwrap();
    let gain = g.constant(Tensor::vector(vec![1.0, 1.0])).unwrap();
    let bias = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    approx(g.value(y).data(), &[-1.0, 1.0, 0.0, 0.0], 1e-4);

    let zero = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
    let shift = g.constant(Tensor::vector(vec![0.5, -2.0])).unwrap();
    let y = g.layer_norm(x, zero, shift, 1e-5).unwrap();
    approx(g.value(y).data(), &[0.5, -2.0, 0.5, -2.0], 0.0);
}

#[test]
fn cross_entropy_cases() {
    let mut g: Graph = Graph::new();
    let x = g.constant(Tensor::matrix(1, 2, vec![0.0, 3f32.ln()]).unwrap()).unwrap();
    let l = g.cross_entropy(x, &[1]).unwrap();
    assert!((g.value(l).data()[0] - 0.75f32.ln().abs()).abs() < 1e-6);

    let u = g.constant(Tensor::zeros(&[1, 4])).unwrap();
    let l = g.cross_entropy(u, &[3]).unwrap();
    assert!((g.value(l).data()[0] - 4f32.ln()).abs() < 1e-6);

    let s = g.constant(Tensor::matrix(1, 3, vec![0.0, 1000.0, 0.0]).unwrap()).unwrap();
    let l = g.cross_entropy(s, &[1]).unwrap();
    assert!(g.value(l).data()[0].abs() < 1e-6);

    assert!(g.cross_entropy(x, &[2]).is_err());
}

#[test]
fn gelu_composition_gradient() {
    let x = Tensor::<f64>::vector(vec![-1.3, -0.2, 0.4, 2.1]);
    let err = finite_difference_check(
        |g, v| {
            let a = g.gelu(v[0])?;
            let b = g.mul(a, v[0])?;
            let c = g.gelu(b)?;
            g.sum(c)
        },
        &[x],
        1e-4,
        4,
        0,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn constant_function_has_zero_error() {
    let x = Tensor::<f32>::vector(vec![1.0, 2.0]);
    let err = finite_difference_check(|g, _| g.constant(Tensor::scalar(3.0)), &[x], 1e-2, 2, 0).unwrap();
    assert_eq!(err, 0.0);
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f32..2.0, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

fn matrix64(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

/// `sum(op(x) * w)` so that no coordinate of the gradient is trivially zero.
fn weighted(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(w.clone())?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(3, 5), c in -5.0f32..5.0) {
        let mut g: Graph = Graph::new();
        let a = g.constant(x.clone()).unwrap();
        let y = g.softmax(a).unwrap();
        for row in g.value(y).data().chunks(5) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
        let shifted = g.shift(a, c).unwrap();
        let z = g.softmax(shifted).unwrap();
        prop_assert!(g.value(y).max_abs_diff(g.value(z)).unwrap() <= 1e-6);
    }

    #[test]
    fn layer_norm_rows_are_centred(x in matrix(4, 6)) {
        let mut g: Graph = Graph::new();
        let a = g.constant(x).unwrap();
        let gain = g.constant(Tensor::ones(&[6])).unwrap();
        let bias = g.constant(Tensor::zeros(&[6])).unwrap();
        let y = g.layer_norm(a, gain, bias, 1e-5).unwrap();
        for row in g.value(y).data().chunks(6) {
            prop_assert!((row.iter().sum::<f32>() / 6.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn op_gradients_match_differences(a in matrix64(3, 4), b in matrix64(4, 2), w in matrix64(3, 4), v in matrix64(3, 2)) {
        type Op = fn(&mut Graph<f64>, Var) -> Result<Var>;
        let ops: [(&str, Op); 6] = [
            ("gelu", |g, x| g.gelu(x)),
            ("sigmoid", |g, x| g.sigmoid(x)),
            ("softmax", |g, x| g.softmax(x)),
            ("log_softmax", |g, x| g.log_softmax(x)),
            ("square", |g, x| g.mul(x, x)),
            ("layer_norm", |g, x| {
                let gain = g.constant(Tensor::vector(vec![1.5, -0.5, 1.0, 0.7]))?;
                let bias = g.constant(Tensor::vector(vec![0.1, 0.2, -0.3, 0.0]))?;
                g.layer_norm(x, gain, bias, 1e-5)
            }),
        ];
        for (name, op) in ops {
            let err = finite_difference_check(
                |g, p| {
                    let y = op(g, p[0])?;
                    weighted(g, y, &w)
                },
                std::slice::from_ref(&a),
                1e-5,
                12,
                1,
            ).unwrap();
            prop_assert!(err <= 1e-4, "{name}: {err}");
        }
        let err = finite_difference_check(
            |g, p| {
                let y = g.matmul(p[0], p[1])?;
                weighted(g, y, &v)
            },
            &[a.clone(), b],
            1e-5,
            20,
            2,
        ).unwrap();
        prop_assert!(err <= 1e-4, "matmul: {err}");
        let err = finite_difference_check(|g, p| g.cross_entropy(p[0], &[0, 3, 1]), &[a], 1e-5, 12, 3).unwrap();
        prop_assert!(err <= 1e-4, "cross_entropy: {err}");
    }
}
