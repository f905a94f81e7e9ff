//! Cutting gated-off heads and feed-forward units out of the weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{GateFamily, GateMask, ImportanceScores};
use crate::model::{LayerSizes, Model};

/// Before/after unit counts of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionRecord {
    pub layer: usize,
    pub heads_before: usize,
    pub heads_after: usize,
    pub ff_before: usize,
    pub ff_after: usize,
}

pub fn retention(before: &LayerSizes, after: &LayerSizes) -> Vec<RetentionRecord> {
    (0..before.heads.len())
        .map(|l| RetentionRecord {
            layer: l,
            heads_before: before.heads[l],
            heads_after: after.heads[l],
            ff_before: before.ff[l],
            ff_after: after.ff[l],
        })
        .collect()
}

/// Kept unit indices per layer, checking that the mask is binary, sized for
/// `sizes` and keeps at least one unit everywhere.
fn kept_units(mask: &[Vec<f32>], sizes: &[usize], family: GateFamily) -> Result<Vec<Vec<usize>>> {
    if mask.len() != sizes.len() {
        return Err(Error::Shape {
            layer: mask.len().min(sizes.len()),
            detail: format!("{} mask covers {} layers, model has {}", family.name(), mask.len(), sizes.len()),
        });
    }
    let mut out = Vec::with_capacity(mask.len());
    for (l, (m, &n)) in mask.iter().zip(sizes).enumerate() {
        if m.len() != n {
            return Err(Error::Shape {
                layer: l,
                detail: format!("{} mask has {} entries, layer has {n}", family.name(), m.len()),
            });
        }
        if let Some(v) = m.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract(format!(
                "{} mask for layer {l} is not binary (found {v})",
                family.name()
            )));
        }
        let kept: Vec<usize> = (0..n).filter(|&i| m[i] == 1.0).collect();
        if kept.is_empty() {
            return Err(Error::contract(format!("{} mask removes every unit of layer {l}", family.name())));
        }
        out.push(kept);
    }
    Ok(out)
}

fn expand_heads(heads: &[usize], head_dim: usize) -> Vec<usize> {
    heads.iter().flat_map(|&h| h * head_dim..(h + 1) * head_dim).collect()
}

/// Deletes the Q/K/V columns and output-projection rows of every head whose
/// gate is 0. Surviving heads keep their relative order.
pub fn prune_attention(model: &Model, mask: &[Vec<f32>]) -> Result<Model> {
    let sizes = model.sizes();
    let kept = kept_units(mask, &sizes.heads, GateFamily::Attention)?;
    let hd = model.head_dim();
    let mut out = model.clone();
    for (layer, heads) in out.layers.iter_mut().zip(&kept) {
        if heads.len() == layer.heads(hd) {
            continue;
        }
        let cols = expand_heads(heads, hd);
        layer.query = layer.query.select_columns(&cols)?;
        layer.query_bias = layer.query_bias.select_rows(&cols)?;
        layer.key = layer.key.select_columns(&cols)?;
        layer.key_bias = layer.key_bias.select_rows(&cols)?;
        layer.value = layer.value.select_columns(&cols)?;
        layer.value_bias = layer.value_bias.select_rows(&cols)?;
        layer.attn_out = layer.attn_out.select_rows(&cols)?;
    }
    out.check_shapes()?;
    Ok(out)
}

/// Deletes the first-map columns, first-map bias entries and second-map rows
/// of every feed-forward unit whose gate is 0.
pub fn prune_feedforward(model: &Model, mask: &[Vec<f32>]) -> Result<Model> {
    let sizes = model.sizes();
    let kept = kept_units(mask, &sizes.ff, GateFamily::FeedForward)?;
    let mut out = model.clone();
    for (layer, units) in out.layers.iter_mut().zip(&kept) {
        if units.len() == layer.ff_units() {
            continue;
        }
        layer.ff_in = layer.ff_in.select_columns(units)?;
        layer.ff_in_bias = layer.ff_in_bias.select_rows(units)?;
        layer.ff_out = layer.ff_out.select_rows(units)?;
    }
    out.check_shapes()?;
    Ok(out)
}

/// Attention first, then feed-forward.
pub fn prune(model: &Model, mask: &GateMask) -> Result<Model> {
    let m = prune_attention(model, &mask.attn)?;
    prune_feedforward(&m, &mask.ff)
}

/// Change in the retained fraction of each family caused by rounding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundingChange {
    pub attn: f64,
    pub ff: f64,
}

/// Rounds each layer's retained count to the nearest multiple of
/// `granularity` (halves round up, at least one multiple, at most the layer
/// size). Units are re-added highest score first and removed lowest score
/// first; equal scores go by index.
pub fn round_sizes(mask: &GateMask, granularity: usize, scores: &ImportanceScores) -> Result<(GateMask, RoundingChange)> {
    if granularity == 0 {
        return Err(Error::config("granularity", "must be at least 1"));
    }
    let mut out = mask.clone();
    for family in [GateFamily::Attention, GateFamily::FeedForward] {
        let sc = scores.family(family);
        for (l, m) in out.family_mut(family).iter_mut().enumerate() {
            let n = m.len();
            let s = sc.get(l).filter(|s| s.len() == n).ok_or_else(|| Error::Shape {
                layer: l,
                detail: format!("{} scores do not match the mask", family.name()),
            })?;
            let kept = m.iter().filter(|&&v| v == 1.0).count();
            let target = ((kept + granularity / 2) / granularity * granularity).max(granularity).min(n);
            let mut order: Vec<usize> = (0..n).collect();
            // best first
            order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            if target > kept {
                let mut need = target - kept;
                for &i in &order {
                    if need == 0 {
                        break;
                    }
                    if m[i] != 1.0 {
                        m[i] = 1.0;
                        need -= 1;
                    }
                }
            } else if target < kept {
                let mut extra = kept - target;
                for &i in order.iter().rev() {
                    if extra == 0 {
                        break;
                    }
                    if m[i] == 1.0 {
                        m[i] = 0.0;
                        extra -= 1;
                    }
                }
            }
        }
    }
    let change = RoundingChange {
        attn: out.retained_fraction(GateFamily::Attention) - mask.retained_fraction(GateFamily::Attention),
        ff: out.retained_fraction(GateFamily::FeedForward) - mask.retained_fraction(GateFamily::FeedForward),
    };
    Ok((out, change))
}

/// Runs `trials` random batches through the gated original and the pruned
/// model and returns the largest absolute logit difference.
pub fn verify_equivalence(original: &Model, mask: &GateMask, pruned: &Model, trials: usize, seed: u64) -> Result<f32> {
    mask.check_sizes(&original.sizes())?;
    if pruned.sizes() != mask.kept_sizes() {
        return Err(Error::contract(format!(
            "pruned sizes {:?} do not match the mask popcounts {:?}",
            pruned.sizes(),
            mask.kept_sizes()
        )));
    }
    if pruned.config != original.config {
        return Err(Error::contract("pruned and original models have different configs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = &original.config;
    let mut worst = 0.0f32;
    for _ in 0..trials {
        let batch = rng.random_range(1..=3);
        let seq = rng.random_range(1..=cfg.max_seq_len);
        let tokens: Vec<usize> = (0..batch * seq).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
        let gated = original.logits(&tokens, batch, seq, Some((&mask.attn, &mask.ff)))?;
        let cut = pruned.logits(&tokens, batch, seq, None)?;
        worst = worst.max(gated.max_abs_diff(&cut)?);
    }
    Ok(worst)
}

/// Size in bytes of the fp32 weight payload.
pub fn payload_bytes(model: &Model) -> usize {
    model.named_tensors().iter().map(|(_, t)| t.len() * 4).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Activation, TransformerConfig};

    fn toy() -> Model {
        build_model(
            &TransformerConfig {
                n_layers: 2,
                n_heads: 4,
                d_model: 16,
                d_ff: 32,
                vocab_size: 20,
                max_seq_len: 8,
                activation: Activation::Gelu,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn all_ones_is_identity() {
        let m = toy();
        let mask = GateMask::ones(&m.sizes());
        assert_eq!(prune(&m, &mask).unwrap(), m);
    }

    #[test]
    fn non_binary_is_rejected() {
        let m = toy();
        let mut mask = GateMask::ones(&m.sizes());
        mask.attn[0][1] = 0.5;
        assert!(matches!(prune_attention(&m, &mask.attn), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_layer_is_rejected() {
        let m = toy();
        let mut mask = GateMask::ones(&m.sizes());
        mask.ff[1] = vec![0.0; 32];
        assert!(matches!(prune_feedforward(&m, &mask.ff), Err(Error::Contract(_))));
    }

    #[test]
    fn rounding_adds_best_pruned_units() {
        let n = 64;
        let mut mask = GateMask {
            attn: vec![vec![1.0; 4]],
            ff: vec![vec![0.0; n]],
            forced: vec![],
        };
        for i in 0..13 {
            mask.ff[0][i] = 1.0;
        }
        let ff_scores: Vec<f32> = (0..n).map(|i| i as f32).collect();
        let scores = ImportanceScores {
            attn: vec![vec![1.0; 4]],
            ff: vec![ff_scores],
        };
        let (r, change) = round_sizes(&mask, 8, &scores).unwrap();
        assert_eq!(r.ff[0].iter().filter(|&&v| v == 1.0).count(), 16);
        // units 61..63 score highest among the pruned
        for i in 61..64 {
            assert_eq!(r.ff[0][i], 1.0);
        }
        assert!((change.ff - 3.0 / 64.0).abs() < 1e-12);
        assert_eq!(r.attn, mask.attn);

        let (same, _) = round_sizes(&mask, 1, &scores).unwrap();
        assert_eq!(same, mask);
    }
}
