//! Gate masks over attention heads and feed-forward activations, and the
//! three ways of choosing them: Bernoulli draws, gradient gain scores, and
//! trained hard-concrete (L0) gates.

mod gain;
mod hard_concrete;
mod l0;
mod random;
mod threshold;

pub use gain::{gain_scores, GainConfig};
pub use hard_concrete::{
    expected_gate, finalize_gates, penalized_objective, prob_gate_one, prob_gate_one_var,
    sample_hard_concrete, sample_hard_concrete_var, HardConcreteGates, HardConcreteParams,
    PenaltyKind, PenaltyWeights,
};
pub use l0::{
    train_gate_family, train_gates_l0, GateObjective, GatePair, GateTrainConfig, GateTrainLog,
};
pub use random::random_gates;
pub use threshold::{threshold_family, threshold_scores};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GateVars, LayerSizes};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateFamily {
    Attention,
    FeedForward,
}

impl GateFamily {
    pub fn name(self) -> &'static str {
        match self {
            GateFamily::Attention => "attn",
            GateFamily::FeedForward => "ff",
        }
    }

    pub fn sizes(self, s: &LayerSizes) -> &[usize] {
        match self {
            GateFamily::Attention => &s.heads,
            GateFamily::FeedForward => &s.ff,
        }
    }
}

/// A unit the degenerate-layer guard kept alive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForcedUnit {
    pub family: GateFamily,
    pub layer: usize,
    pub unit: usize,
}

/// Per-layer gate vectors. Finalized masks hold only 0 and 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateMask {
    pub attn: Vec<Vec<f32>>,
    pub ff: Vec<Vec<f32>>,
    /// Units retained only because their layer would otherwise be empty.
    #[serde(default)]
    pub forced: Vec<ForcedUnit>,
}

/// Per-gate importance, `>= 0`, shaped like the mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub attn: Vec<Vec<f32>>,
    pub ff: Vec<Vec<f32>>,
}

impl ImportanceScores {
    pub fn family(&self, f: GateFamily) -> &[Vec<f32>] {
        match f {
            GateFamily::Attention => &self.attn,
            GateFamily::FeedForward => &self.ff,
        }
    }
}

impl GateMask {
    pub fn ones(sizes: &LayerSizes) -> Self {
        Self {
            attn: sizes.heads.iter().map(|&h| vec![1.0; h]).collect(),
            ff: sizes.ff.iter().map(|&f| vec![1.0; f]).collect(),
            forced: Vec::new(),
        }
    }

    pub fn family(&self, f: GateFamily) -> &[Vec<f32>] {
        match f {
            GateFamily::Attention => &self.attn,
            GateFamily::FeedForward => &self.ff,
        }
    }

    pub fn family_mut(&mut self, f: GateFamily) -> &mut Vec<Vec<f32>> {
        match f {
            GateFamily::Attention => &mut self.attn,
            GateFamily::FeedForward => &mut self.ff,
        }
    }

    pub fn is_binary(&self) -> bool {
        self.attn
            .iter()
            .chain(&self.ff)
            .flatten()
            .all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn is_all_ones(&self) -> bool {
        self.attn.iter().chain(&self.ff).flatten().all(|&v| v == 1.0)
    }

    /// Checks per-layer lengths against a model's sizes.
    pub fn check_sizes(&self, sizes: &LayerSizes) -> Result<()> {
        for family in [GateFamily::Attention, GateFamily::FeedForward] {
            let want = family.sizes(sizes);
            let have = self.family(family);
            if have.len() != want.len() {
                return Err(Error::Shape {
                    layer: have.len().min(want.len()),
                    detail: format!("{} mask covers {} layers, model has {}", family.name(), have.len(), want.len()),
                });
            }
            for (l, (v, &n)) in have.iter().zip(want).enumerate() {
                if v.len() != n {
                    return Err(Error::Shape {
                        layer: l,
                        detail: format!("{} mask has {} entries, layer has {n}", family.name(), v.len()),
                    });
                }
            }
        }
        Ok(())
    }

    /// Indices of retained units in one layer of one family.
    pub fn kept(&self, family: GateFamily, layer: usize) -> Vec<usize> {
        self.family(family)[layer]
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-layer popcounts; the sizes a pruned model will have.
    pub fn kept_sizes(&self) -> LayerSizes {
        let count = |v: &Vec<Vec<f32>>| v.iter().map(|l| l.iter().filter(|&&x| x != 0.0).count()).collect();
        LayerSizes {
            heads: count(&self.attn),
            ff: count(&self.ff),
        }
    }

    pub fn retained_fraction(&self, family: GateFamily) -> f64 {
        let v = self.family(family);
        let total: usize = v.iter().map(Vec::len).sum();
        let kept = v.iter().flatten().filter(|&&x| x != 0.0).count();
        if total == 0 {
            1.0
        } else {
            kept as f64 / total as f64
        }
    }

    /// Binds the mask into a graph as constant gate vectors.
    pub fn bind(&self, g: &mut Graph) -> Result<GateVars> {
        let bind = |g: &mut Graph, v: &[Vec<f32>]| {
            v.iter()
                .map(|x| g.constant(Tensor::vector(x.clone())).map(Some))
                .collect::<Result<Vec<_>>>()
        };
        Ok(GateVars {
            attn: bind(g, &self.attn)?,
            ff: bind(g, &self.ff)?,
        })
    }
}

/// Ensures every layer of `mask` keeps at least one unit by retaining the
/// highest-scoring unit of any emptied layer (lowest index on ties).
pub fn apply_guard(
    family: GateFamily,
    mask: &mut [Vec<f32>],
    scores: &[Vec<f32>],
) -> Vec<ForcedUnit> {
    let mut forced = Vec::new();
    for (layer, (m, s)) in mask.iter_mut().zip(scores).enumerate() {
        if m.is_empty() || m.iter().any(|&v| v != 0.0) {
            continue;
        }
        let mut best = 0;
        for (i, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = i;
            }
        }
        m[best] = 1.0;
        forced.push(ForcedUnit {
            family,
            layer,
            unit: best,
        });
    }
    forced
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_keeps_best_unit() {
        let mut m = vec![vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]];
        let s = vec![vec![0.1, 0.9, 0.5], vec![0.0, 5.0, 0.0]];
        let forced = apply_guard(GateFamily::FeedForward, &mut m, &s);
        assert_eq!(m[0], vec![0.0, 1.0, 0.0]);
        assert_eq!(m[1], vec![1.0, 0.0, 0.0]);
        assert_eq!(
            forced,
            vec![ForcedUnit {
                family: GateFamily::FeedForward,
                layer: 0,
                unit: 1
            }]
        );
    }

    #[test]
    fn mask_size_mismatch_names_layer() {
        let sizes = LayerSizes {
            heads: vec![4, 4],
            ff: vec![8, 8],
        };
        let mut m = GateMask::ones(&sizes);
        m.check_sizes(&sizes).unwrap();
        m.ff[1].pop();
        match m.check_sizes(&sizes) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn popcounts() {
        let m = GateMask {
            attn: vec![vec![1.0, 0.0], vec![1.0, 1.0]],
            ff: vec![vec![0.0, 0.0, 1.0], vec![1.0, 1.0, 1.0]],
            forced: vec![],
        };
        let s = m.kept_sizes();
        assert_eq!(s.heads, vec![1, 2]);
        assert_eq!(s.ff, vec![1, 3]);
        assert!((m.retained_fraction(GateFamily::FeedForward) - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(m.kept(GateFamily::FeedForward, 0), vec![2]);
    }
}
