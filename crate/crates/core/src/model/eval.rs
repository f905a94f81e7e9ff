use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::gates::GateMask;

/// One span-extraction example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub tokens: Vec<usize>,
    pub start: usize,
    pub end: usize,
}

/// Equal-length examples packed row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct QaBatch {
    pub token_ids: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    pub start_targets: Vec<usize>,
    pub end_targets: Vec<usize>,
}

impl QaBatch {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a QaExample>) -> Result<Self> {
        let mut token_ids = Vec::new();
        let mut start_targets = Vec::new();
        let mut end_targets = Vec::new();
        let mut seq = None;
        for ex in examples {
            let len = ex.tokens.len();
            if *seq.get_or_insert(len) != len {
                return Err(Error::contract(format!(
                    "examples in a batch must share one length ({} vs {len})",
                    seq.unwrap()
                )));
            }
            if ex.start >= len || ex.end >= len {
                return Err(Error::Index {
                    op: "QaBatch",
                    index: ex.start.max(ex.end),
                    len,
                });
            }
            token_ids.extend_from_slice(&ex.tokens);
            start_targets.push(ex.start);
            end_targets.push(ex.end);
        }
        let seq = seq.ok_or_else(|| Error::contract("empty batch"))?;
        if seq == 0 {
            return Err(Error::contract("examples have no tokens"));
        }
        Ok(Self {
            token_ids,
            batch: start_targets.len(),
            seq,
            start_targets,
            end_targets,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Fraction of examples with both argmax start and argmax end correct.
    pub span_exact_match: f64,
    pub start_acc: f64,
    pub end_acc: f64,
    pub mean_loss: f64,
}

const EVAL_BATCH: usize = 32;

/// Scores `data` under an optional gate mask. Per-example losses are summed
/// in sorted order, so the result does not depend on dataset order.
pub fn evaluate(model: &Model, data: &[QaExample], mask: Option<&GateMask>) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::contract("evaluate needs a non-empty dataset"));
    }
    let gates = mask.map(|m| (m.attn.as_slice(), m.ff.as_slice()));
    let (mut start_hits, mut end_hits, mut both_hits) = (0usize, 0usize, 0usize);
    let mut losses = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let batch = QaBatch::from_examples(chunk)?;
        let logits = model.logits(&batch.token_ids, batch.batch, batch.seq, gates)?;
        let seq = batch.seq;
        for (b, ex) in chunk.iter().enumerate() {
            let rows = &logits.data()[b * seq * 2..(b + 1) * seq * 2];
            let starts: Vec<f32> = rows.iter().step_by(2).copied().collect();
            let ends: Vec<f32> = rows.iter().skip(1).step_by(2).copied().collect();
            let s_ok = argmax(&starts) == ex.start;
            let e_ok = argmax(&ends) == ex.end;
            start_hits += usize::from(s_ok);
            end_hits += usize::from(e_ok);
            both_hits += usize::from(s_ok && e_ok);
            losses.push(0.5 * (nll(&starts, ex.start) + nll(&ends, ex.end)));
        }
    }
    losses.sort_by(f64::total_cmp);
    let n = data.len() as f64;
    Ok(Metrics {
        span_exact_match: both_hits as f64 / n,
        start_acc: start_hits as f64 / n,
        end_acc: end_hits as f64 / n,
        mean_loss: losses.iter().sum::<f64>() / n,
    })
}

/// Index of the first maximum.
pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn nll(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = max + logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    lse - logits[target] as f64
}
