use serde::{Deserialize, Serialize};

use super::ImportanceScores;
use crate::error::{Error, Result};
use crate::model::{forward, qa_loss, GateVars, Model, QaBatch, QaExample};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GainConfig {
    /// Examples per gradient evaluation. At 1 the scores are a mean of
    /// per-example gradient magnitudes and do not depend on data order.
    pub batch_size: usize,
    /// Stop after this many batches; `None` makes one full pass.
    pub max_batches: Option<usize>,
}

impl Default for GainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1,
            max_batches: None,
        }
    }
}

/// Head/unit importance: the mean over batches of `|dL/dgate|` with every
/// gate held at 1. Model weights are read only.
pub fn gain_scores(model: &Model, data: &[QaExample], config: GainConfig) -> Result<ImportanceScores> {
    if data.is_empty() {
        return Err(Error::contract("gain_scores needs a non-empty dataset"));
    }
    if config.batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let sizes = model.sizes();
    let mut attn: Vec<Vec<f64>> = sizes.heads.iter().map(|&h| vec![0.0; h]).collect();
    let mut ff: Vec<Vec<f64>> = sizes.ff.iter().map(|&f| vec![0.0; f]).collect();
    let limit = config.max_batches.unwrap_or(usize::MAX);
    let mut batches = 0usize;

    for chunk in data.chunks(config.batch_size).take(limit) {
        let batch = QaBatch::from_examples(chunk)?;
        let mut g = Graph::new();
        let mv = model.bind(&mut g, false)?;
        let attn_vars = sizes
            .heads
            .iter()
            .map(|&h| g.param(Tensor::ones(&[h])))
            .collect::<Result<Vec<_>>>()?;
        let ff_vars = sizes
            .ff
            .iter()
            .map(|&f| g.param(Tensor::ones(&[f])))
            .collect::<Result<Vec<_>>>()?;
        let gates = GateVars {
            attn: attn_vars.iter().copied().map(Some).collect(),
            ff: ff_vars.iter().copied().map(Some).collect(),
        };
        let logits = forward(&mut g, &mv, &batch.token_ids, batch.batch, batch.seq, &gates)?;
        let loss = qa_loss(&mut g, &logits, &batch.start_targets, &batch.end_targets)?;
        g.backward(loss)?;
        for (acc, &v) in attn.iter_mut().zip(&attn_vars).chain(ff.iter_mut().zip(&ff_vars)) {
            let grad = g.grad(v).ok_or_else(|| Error::contract("gate received no gradient"))?;
            for (a, &d) in acc.iter_mut().zip(grad.data()) {
                *a += f64::from(d.abs());
            }
        }
        batches += 1;
    }

    let mean = |v: Vec<Vec<f64>>| -> Vec<Vec<f32>> {
        v.into_iter()
            .map(|l| l.into_iter().map(|x| (x / batches as f64) as f32).collect())
            .collect()
    };
    Ok(ImportanceScores {
        attn: mean(attn),
        ff: mean(ff),
    })
}
