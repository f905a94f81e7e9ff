use proptest::prelude::*;

use qaprune::checkpoint::{from_bytes, load_checkpoint, to_bytes, Checkpoint};
use qaprune::data::{generate_synthetic_task, read_jsonl, write_jsonl, SyntheticTaskConfig};
use qaprune::gates::{random_gates, GateFamily, GatePair, HardConcreteGates, HardConcreteParams};
use qaprune::model::{build_model, count_params, Activation, TransformerConfig};
use qaprune::pipeline::{run_pipeline, Method, PipelineConfig};
use qaprune::report::{PruneReport, REPORT_JSON, RETENTION_CSV, SUMMARY_COLUMNS, SUMMARY_CSV};
use qaprune::surgery::prune;
use qaprune::train::TrainConfig;

fn model_config() -> TransformerConfig {
    TransformerConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 16,
        d_ff: 20,
        vocab_size: 32,
        max_seq_len: 16,
        activation: Activation::Gelu,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pruned_checkpoint_round_trips(seed in 0u64..500, p in 0.2f64..0.9, la in -3.0f32..3.0) {
        let m = build_model(&model_config(), seed).unwrap();
        let mask = random_gates(&m.sizes(), p, seed).unwrap();
        let pruned = prune(&m, &mask).unwrap().frozen();
        let gates = GatePair {
            attn: HardConcreteGates::new(GateFamily::Attention, &[4, 4], la, HardConcreteParams::default()),
            ff: HardConcreteGates::new(GateFamily::FeedForward, &[20, 20], -la, HardConcreteParams::default()),
            history: Vec::new(),
        };
        let ckpt = Checkpoint { model: pruned, mask: Some(mask), gates: Some(gates) };
        let back = from_bytes(&to_bytes(&ckpt)).unwrap();
        prop_assert_eq!(&back.model.sizes(), &ckpt.model.sizes());
        for ((na, a), (nb, b)) in back.model.named_tensors().iter().zip(ckpt.model.named_tensors().iter()) {
            prop_assert_eq!(na, nb);
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(back.mask, ckpt.mask);
        prop_assert_eq!(back.gates.map(|g| (g.attn, g.ff)), ckpt.gates.map(|g| (g.attn, g.ff)));
        prop_assert!(back.model.is_frozen());
    }
}

#[test]
fn jsonl_round_trip() {
    let task = generate_synthetic_task(&SyntheticTaskConfig {
        n_train: 30,
        n_dev: 5,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    write_jsonl(&path, &task.train).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), task.train);
}

#[test]
fn report_formats_agree() {
    let dir = tempfile::tempdir().unwrap();
    let task = SyntheticTaskConfig {
        n_train: 60,
        n_dev: 20,
        seq_len: 16,
        ..Default::default()
    };
    let cfg = PipelineConfig {
        model: model_config(),
        task,
        base_train: TrainConfig {
            epochs: 1.0,
            batch_size: 16,
            ..Default::default()
        },
        method: Method::Gain,
        keep_fraction: Some(0.4),
        seeds: vec![0, 1],
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let report = run_pipeline(&cfg).unwrap();
    let json = PruneReport::from_json(&std::fs::read_to_string(dir.path().join(REPORT_JSON)).unwrap()).unwrap();
    assert_eq!(json, report);

    let summary = std::fs::read_to_string(dir.path().join(SUMMARY_CSV)).unwrap();
    let rows: Vec<Vec<&str>> = summary.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), report.runs.len());
    let col = |name: &str| SUMMARY_COLUMNS.iter().position(|c| *c == name).unwrap();
    for (row, run) in rows.iter().zip(&report.runs) {
        assert_eq!(row.len(), SUMMARY_COLUMNS.len());
        assert_eq!(row[col("seed")].parse::<u64>().unwrap(), run.seed);
        assert_eq!(row[col("params_after")].parse::<usize>().unwrap(), run.params_after);
        assert_eq!(row[col("flops_after")].parse::<u64>().unwrap(), run.flops_after);
        for (name, v) in [
            ("attn_removed_pct", run.attn_removed_pct),
            ("ff_removed_pct", run.ff_removed_pct),
            ("em_pruned", run.pruned.exact_match),
        ] {
            assert!((row[col(name)].parse::<f64>().unwrap() - v).abs() < 1e-9, "{name}");
        }
    }

    let retention = std::fs::read_to_string(dir.path().join(RETENTION_CSV)).unwrap();
    assert_eq!(retention.lines().count() - 1, cfg.model.n_layers * report.runs.len());

    for run in &report.runs {
        assert_eq!(run.retention.len(), cfg.model.n_layers);
        let (hb, ha, fb, fa) = run.retention.iter().fold((0, 0, 0, 0), |s, r| {
            (s.0 + r.heads_before, s.1 + r.heads_after, s.2 + r.ff_before, s.3 + r.ff_after)
        });
        assert!((run.attn_removed_pct - 100.0 * (1.0 - ha as f64 / hb as f64)).abs() <= 0.05);
        assert!((run.ff_removed_pct - 100.0 * (1.0 - fa as f64 / fb as f64)).abs() <= 0.05);
        assert!(run.ff_removed_pct > 0.0);

        let ckpt = load_checkpoint(&dir.path().join(format!("pruned-{}.qapr", run.seed))).unwrap();
        assert_eq!(count_params(&ckpt.model), run.params_after);
        let heads: Vec<usize> = run.retention.iter().map(|r| r.heads_after).collect();
        assert_eq!(ckpt.model.sizes().heads, heads);
    }
}
