//! Synthetic key-lookup span task and JSON-lines dataset files.
//!
//! Layout of one example: `[CLS, open_q, SEP, passage...]`. The passage is
//! filler tokens with `n_pairs` bracketed spans `open_k span... close_k`, each
//! using a different key. The answer is the span inside the brackets whose
//! key matches `open_q`. A no-answer example asks for a key that is absent and
//! points both targets at position 0.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::QaExample;

pub const CLS: usize = 0;
pub const SEP: usize = 1;
const FIRST_KEY: usize = 2;
const QUESTION_LEN: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_dev: usize,
    /// Distinct keys; each uses an opening and a closing token.
    pub n_keys: usize,
    /// Bracketed spans per passage.
    pub n_pairs: usize,
    pub max_span: usize,
    pub no_answer_rate: f64,
    /// Fraction of training examples whose targets are replaced by a random
    /// passage span.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            seq_len: 24,
            n_train: 4000,
            n_dev: 300,
            n_keys: 4,
            n_pairs: 2,
            max_span: 3,
            no_answer_rate: 0.0,
            noise_rate: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    fn first_filler(&self) -> usize {
        FIRST_KEY + 2 * self.n_keys
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 4 {
            return Err(Error::config("seq_len", "must be at least 4"));
        }
        if self.n_train == 0 {
            return Err(Error::config("n_train", "must be at least 1"));
        }
        if self.n_dev == 0 {
            return Err(Error::config("n_dev", "must be at least 1"));
        }
        if self.n_keys == 0 {
            return Err(Error::config("n_keys", "must be at least 1"));
        }
        if self.n_pairs == 0 || self.n_pairs > self.n_keys {
            return Err(Error::config("n_pairs", format!("must lie in 1..={}", self.n_keys)));
        }
        if self.no_answer_rate > 0.0 && self.n_pairs == self.n_keys {
            return Err(Error::config("no_answer_rate", "needs n_pairs < n_keys so a key can be absent"));
        }
        if self.max_span == 0 {
            return Err(Error::config("max_span", "must be at least 1"));
        }
        if self.vocab_size <= self.first_filler() {
            return Err(Error::config(
                "vocab_size",
                format!("{} leaves no filler tokens after {} keys", self.vocab_size, self.n_keys),
            ));
        }
        let needed = self.n_pairs * (self.max_span + 2);
        if self.seq_len - QUESTION_LEN < needed {
            return Err(Error::config(
                "seq_len",
                format!(
                    "passage of {} tokens cannot hold {} spans of up to {} tokens",
                    self.seq_len - QUESTION_LEN,
                    self.n_pairs,
                    self.max_span
                ),
            ));
        }
        for (field, r) in [("no_answer_rate", self.no_answer_rate), ("noise_rate", self.noise_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub train: Vec<QaExample>,
    pub dev: Vec<QaExample>,
}

pub fn generate_synthetic_task(cfg: &SyntheticTaskConfig) -> Result<SyntheticTask> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train: Vec<QaExample> = (0..cfg.n_train).map(|_| example(cfg, &mut rng)).collect();
    let dev = (0..cfg.n_dev).map(|_| example(cfg, &mut rng)).collect();
    for ex in &mut train {
        if rng.random::<f64>() < cfg.noise_rate {
            let a = rng.random_range(QUESTION_LEN..cfg.seq_len);
            let b = rng.random_range(QUESTION_LEN..cfg.seq_len);
            ex.start = a.min(b);
            ex.end = a.max(b);
        }
    }
    Ok(SyntheticTask { train, dev })
}

fn example(cfg: &SyntheticTaskConfig, rng: &mut ChaCha8Rng) -> QaExample {
    let passage_len = cfg.seq_len - QUESTION_LEN;
    let keys = sample(rng, cfg.n_keys, cfg.n_keys).into_vec();
    let (present, absent) = keys.split_at(cfg.n_pairs);
    let lengths: Vec<usize> = (0..cfg.n_pairs).map(|_| rng.random_range(1..=cfg.max_span)).collect();
    let used: usize = lengths.iter().map(|l| l + 2).sum();
    let free = passage_len - used;

    // choose which of the free + n_pairs slots hold a bracketed block
    let mut block_slots = sample(rng, free + cfg.n_pairs, cfg.n_pairs).into_vec();
    block_slots.sort_unstable();
    let mut order: Vec<usize> = (0..cfg.n_pairs).collect();
    order.shuffle(rng);

    let filler = |rng: &mut ChaCha8Rng| rng.random_range(cfg.first_filler()..cfg.vocab_size);
    let mut tokens = vec![CLS, 0, SEP];
    let mut spans = vec![(0usize, 0usize); cfg.n_pairs];
    let mut next_block = 0;
    for slot in 0..free + cfg.n_pairs {
        if next_block < cfg.n_pairs && block_slots[next_block] == slot {
            let j = order[next_block];
            let key = present[j];
            tokens.push(FIRST_KEY + 2 * key);
            let start = tokens.len();
            for _ in 0..lengths[j] {
                tokens.push(filler(rng));
            }
            spans[j] = (start, tokens.len() - 1);
            tokens.push(FIRST_KEY + 2 * key + 1);
            next_block += 1;
        } else {
            tokens.push(filler(rng));
        }
    }

    let no_answer = cfg.no_answer_rate > 0.0 && rng.random::<f64>() < cfg.no_answer_rate;
    let (asked, (start, end)) = if no_answer {
        (absent[rng.random_range(0..absent.len())], (0, 0))
    } else {
        let j = rng.random_range(0..cfg.n_pairs);
        (present[j], spans[j])
    };
    tokens[1] = FIRST_KEY + 2 * asked;
    QaExample { tokens, start, end }
}

/// Deterministic split: the first `round(fraction * n)` examples and the rest.
pub fn split_fraction(data: &[QaExample], fraction: f64) -> (Vec<QaExample>, Vec<QaExample>) {
    let k = ((fraction.clamp(0.0, 1.0) * data.len() as f64).round() as usize).min(data.len());
    (data[..k].to_vec(), data[k..].to_vec())
}

pub fn write_jsonl(path: &Path, data: &[QaExample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in data {
        let line = serde_json::to_string(ex).expect("examples serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QaExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: QaExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        if ex.start > ex.end || ex.end >= ex.tokens.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                reason: format!("line {}: span {}..={} outside {} tokens", i + 1, ex.start, ex.end, ex.tokens.len()),
            });
        }
        out.push(ex);
    }
    Ok(out)
}
