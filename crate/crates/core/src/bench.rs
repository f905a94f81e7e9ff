//! Wall-clock latency of inference passes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Sequences per timed pass, the size of the evaluation set.
    pub n_examples: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            batch_size: 1,
            seq_len: 24,
            n_examples: 300,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub median_seconds: f64,
    /// `max - min` over the timed runs.
    pub spread_seconds: f64,
    pub runs: Vec<f64>,
}

/// Times `repeats` full passes over `n_examples` random sequences after one
/// untimed warmup pass. Everything runs on the calling thread.
pub fn benchmark_latency(model: &Model, cfg: &LatencyConfig) -> Result<Latency> {
    if cfg.repeats == 0 {
        return Err(Error::config("repeats", "must be at least 1"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    if cfg.n_examples == 0 {
        return Err(Error::config("n_examples", "must be at least 1"));
    }
    if cfg.seq_len == 0 || cfg.seq_len > model.config.max_seq_len {
        return Err(Error::config(
            "seq_len",
            format!("must lie in 1..={}", model.config.max_seq_len),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches: Vec<(usize, Vec<usize>)> = (0..cfg.n_examples)
        .step_by(cfg.batch_size)
        .map(|start| {
            let b = cfg.batch_size.min(cfg.n_examples - start);
            let tokens = (0..b * cfg.seq_len)
                .map(|_| rng.random_range(0..model.config.vocab_size))
                .collect();
            (b, tokens)
        })
        .collect();
    let pass = || -> Result<()> {
        for (b, tokens) in &batches {
            std::hint::black_box(model.logits(tokens, *b, cfg.seq_len, None)?);
        }
        Ok(())
    };
    pass()?;
    let mut runs = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let t = Instant::now();
        pass()?;
        runs.push(t.elapsed().as_secs_f64());
    }
    let mut sorted = runs.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    Ok(Latency {
        median_seconds: median,
        spread_seconds: sorted[sorted.len() - 1] - sorted[0],
        runs,
    })
}
