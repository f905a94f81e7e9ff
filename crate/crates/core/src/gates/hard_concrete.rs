//! Hard-concrete gates: a binary-concrete sample stretched to
//! `(gamma_low, zeta)` and clamped into `[0, 1]`, which puts point masses on
//! exactly 0 and exactly 1 while staying differentiable in `log_alpha`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{apply_guard, ForcedUnit, GateFamily};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Graph, Tensor, Var};

const U_EPS: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardConcreteParams {
    /// Temperature.
    pub beta: f32,
    /// Lower stretch limit, `< 0`.
    pub gamma_low: f32,
    /// Upper stretch limit, `> 1`.
    pub zeta: f32,
}

impl Default for HardConcreteParams {
    fn default() -> Self {
        Self {
            beta: 2.0 / 3.0,
            gamma_low: -0.1,
            zeta: 1.1,
        }
    }
}

impl HardConcreteParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::config("beta", format!("{} must be > 0", self.beta)));
        }
        if !(self.gamma_low < 0.0) {
            return Err(Error::config("gamma_low", format!("{} must be < 0", self.gamma_low)));
        }
        if !(self.zeta > 1.0) {
            return Err(Error::config("zeta", format!("{} must be > 1", self.zeta)));
        }
        Ok(())
    }

    fn stretch(&self, s: f32) -> f32 {
        s * (self.zeta - self.gamma_low) + self.gamma_low
    }

    /// `logit(c)` where the stretched sample reaches `target` at `s = c`.
    fn logit_at(&self, target: f32) -> f32 {
        let c = (target - self.gamma_low) / (self.zeta - self.gamma_low);
        (c / (1.0 - c)).ln()
    }
}

/// Which event the sparsity penalty counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// `P(gate == 1)`.
    #[default]
    ExactOne,
    /// `P(gate != 0)`, the usual L0 surrogate.
    NonZero,
}

impl PenaltyKind {
    /// The constant `c` with `P(event) = sigmoid(log_alpha - c)`.
    fn offset(self, p: &HardConcreteParams) -> f32 {
        match self {
            PenaltyKind::ExactOne => p.beta * p.logit_at(1.0),
            PenaltyKind::NonZero => p.beta * p.logit_at(0.0),
        }
    }

    pub fn probability(self, log_alpha: f32, p: &HardConcreteParams) -> f32 {
        sigmoid(log_alpha - self.offset(p))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PenaltyWeights {
    pub lambda_attn: f32,
    pub lambda_ff: f32,
}

impl PenaltyWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_attn >= 0.0) {
            return Err(Error::config("lambda_attn", "must be >= 0"));
        }
        if !(self.lambda_ff >= 0.0) {
            return Err(Error::config("lambda_ff", "must be >= 0"));
        }
        Ok(())
    }

    pub fn for_family(&self, f: GateFamily) -> f32 {
        match f {
            GateFamily::Attention => self.lambda_attn,
            GateFamily::FeedForward => self.lambda_ff,
        }
    }
}

/// Trainable `log_alpha` for one gate family, one vector per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardConcreteGates {
    pub family: GateFamily,
    pub log_alpha: Vec<Vec<f32>>,
    pub params: HardConcreteParams,
}

impl HardConcreteGates {
    pub fn new(family: GateFamily, sizes: &[usize], init: f32, params: HardConcreteParams) -> Self {
        Self {
            family,
            log_alpha: sizes.iter().map(|&n| vec![init; n]).collect(),
            params,
        }
    }

    pub fn len(&self) -> usize {
        self.log_alpha.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn logistic_noise(u: f32) -> f32 {
    let u = u.clamp(U_EPS, 1.0 - U_EPS);
    u.ln() - (1.0 - u).ln()
}

/// Draws one gate value per `log_alpha` entry.
pub fn sample_hard_concrete(gates: &HardConcreteGates, rng: &mut impl Rng) -> Vec<Vec<f32>> {
    let p = gates.params;
    gates
        .log_alpha
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|&la| {
                    let s = sigmoid((logistic_noise(rng.random()) + la) / p.beta);
                    p.stretch(s).clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect()
}

/// Differentiable sample given uniform draws `u` (one per gate):
/// `clamp(sigmoid((ln u - ln(1-u) + log_alpha) / beta) * (zeta - gamma_low) + gamma_low, 0, 1)`.
pub fn sample_hard_concrete_var(
    g: &mut Graph,
    log_alpha: Var,
    u: &[f32],
    p: &HardConcreteParams,
) -> Result<Var> {
    let noise = Tensor::new(g.value(log_alpha).shape().to_vec(), u.iter().map(|&x| logistic_noise(x)).collect())?;
    let noise = g.constant(noise)?;
    let x = g.add(log_alpha, noise)?;
    let x = g.scale(x, 1.0 / p.beta)?;
    let s = g.sigmoid(x)?;
    let s = g.scale(s, p.zeta - p.gamma_low)?;
    let s = g.shift(s, p.gamma_low)?;
    g.clamp(s, 0.0, 1.0)
}

/// `P(gate = 1) = sigmoid(log_alpha - beta * logit((1 - gamma_low) / (zeta - gamma_low)))`.
pub fn prob_gate_one(gates: &HardConcreteGates) -> Vec<Vec<f32>> {
    gates
        .log_alpha
        .iter()
        .map(|l| l.iter().map(|&la| PenaltyKind::ExactOne.probability(la, &gates.params)).collect())
        .collect()
}

/// Graph version of the per-gate penalty probability.
pub fn prob_gate_one_var(g: &mut Graph, log_alpha: Var, p: &HardConcreteParams, kind: PenaltyKind) -> Result<Var> {
    let x = g.shift(log_alpha, -kind.offset(p))?;
    g.sigmoid(x)
}

/// Deterministic test-time gate value
/// `clamp(sigmoid(log_alpha / beta) * (zeta - gamma_low) + gamma_low, 0, 1)`.
pub fn expected_gate(log_alpha: f32, p: &HardConcreteParams) -> f32 {
    p.stretch(sigmoid(log_alpha / p.beta)).clamp(0.0, 1.0)
}

/// `task_loss + lambda_attn * sum P(attn gate active) + lambda_ff * sum P(ff gate active)`.
#[allow(clippy::too_many_arguments)]
pub fn penalized_objective(
    g: &mut Graph,
    task_loss: Var,
    attn_log_alpha: &[Var],
    ff_log_alpha: &[Var],
    params: &HardConcreteParams,
    weights: &PenaltyWeights,
    kind: PenaltyKind,
) -> Result<Var> {
    let mut total = task_loss;
    for (vars, lambda) in [(attn_log_alpha, weights.lambda_attn), (ff_log_alpha, weights.lambda_ff)] {
        if lambda == 0.0 {
            continue;
        }
        for &la in vars {
            let p = prob_gate_one_var(g, la, params, kind)?;
            let s = g.sum(p)?;
            let s = g.scale(s, lambda)?;
            total = g.add(total, s)?;
        }
    }
    Ok(total)
}

/// Retains a gate when its test-time value reaches `threshold`.
pub fn finalize_gates(gates: &HardConcreteGates, threshold: f32) -> (Vec<Vec<f32>>, Vec<ForcedUnit>) {
    let scores: Vec<Vec<f32>> = gates
        .log_alpha
        .iter()
        .map(|l| l.iter().map(|&la| expected_gate(la, &gates.params)).collect())
        .collect();
    let mut mask: Vec<Vec<f32>> = scores
        .iter()
        .map(|l| l.iter().map(|&z| if z >= threshold { 1.0 } else { 0.0 }).collect())
        .collect();
    // rank by log_alpha so saturated test-time values still order the guard
    let forced = apply_guard(gates.family, &mut mask, &gates.log_alpha);
    (mask, forced)
}
