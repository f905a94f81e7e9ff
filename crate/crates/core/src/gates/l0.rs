use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hard_concrete::{
    finalize_gates, prob_gate_one, prob_gate_one_var, sample_hard_concrete_var, HardConcreteGates,
    HardConcreteParams, PenaltyKind, PenaltyWeights,
};
use super::{threshold_family, GateFamily, GateMask};
use crate::error::{Error, Result};
use crate::model::{forward, qa_loss, GateVars, Model, QaBatch, QaExample};
use crate::tensor::{Graph, Tensor, Var};
use crate::train::{distillation_loss, Adam};

/// Task term optimised while the gates are trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GateObjective {
    #[default]
    CrossEntropy,
    /// Match the ungated model's span distributions.
    Distillation { temperature: f32, alpha: f32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateTrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: f32,
    pub init_log_alpha: f32,
    pub params: HardConcreteParams,
    pub penalty: PenaltyKind,
    /// Test-time gate value at or above which a gate is kept.
    pub threshold: f32,
    pub seed: u64,
}

impl Default for GateTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 24,
            epochs: 1.0,
            init_log_alpha: 2.0,
            params: HardConcreteParams::default(),
            penalty: PenaltyKind::ExactOne,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl GateTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.epochs >= 0.0) || !self.epochs.is_finite() {
            return Err(Error::config("epochs", "must be >= 0"));
        }
        if !self.init_log_alpha.is_finite() {
            return Err(Error::config("init_log_alpha", "must be finite"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One optimisation step of gate training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateTrainLog {
    pub family: GateFamily,
    pub step: usize,
    pub task_loss: f64,
    /// Sum of per-gate penalty probabilities after the step.
    pub expected_active: f64,
}

/// Independently trained attention and feed-forward gates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatePair {
    pub attn: HardConcreteGates,
    pub ff: HardConcreteGates,
    pub history: Vec<GateTrainLog>,
}

impl GatePair {
    /// Binary mask from thresholding each gate's test-time value.
    pub fn mask(&self, threshold: f32) -> GateMask {
        let (attn, mut forced) = finalize_gates(&self.attn, threshold);
        let (ff, forced_ff) = finalize_gates(&self.ff, threshold);
        forced.extend(forced_ff);
        GateMask { attn, ff, forced }
    }

    /// Binary mask keeping the `keep_fraction` highest `log_alpha` per family.
    pub fn mask_at_fraction(&self, keep_fraction: f64) -> GateMask {
        let (attn, mut forced) = threshold_family(GateFamily::Attention, &self.attn.log_alpha, keep_fraction);
        let (ff, forced_ff) = threshold_family(GateFamily::FeedForward, &self.ff.log_alpha, keep_fraction);
        forced.extend(forced_ff);
        GateMask { attn, ff, forced }
    }

    /// Per-gate probability of being exactly one.
    pub fn prob_one(&self) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        (prob_gate_one(&self.attn), prob_gate_one(&self.ff))
    }
}

/// Trains both families one after the other, each with the other ungated.
/// A family with zero penalty weight is left at its initial (open) state.
pub fn train_gates_l0(
    model: &Model,
    data: &[QaExample],
    weights: &PenaltyWeights,
    objective: GateObjective,
    config: &GateTrainConfig,
) -> Result<GatePair> {
    weights.validate()?;
    let mut history = Vec::new();
    let mut train = |family: GateFamily| -> Result<HardConcreteGates> {
        let lambda = weights.for_family(family);
        if lambda == 0.0 {
            config.validate()?;
            let sizes = model.sizes();
            return Ok(HardConcreteGates::new(family, family.sizes(&sizes), config.init_log_alpha, config.params));
        }
        let (gates, log) = train_gate_family(model, data, family, lambda, objective, config)?;
        history.extend(log);
        Ok(gates)
    };
    let attn = train(GateFamily::Attention)?;
    let ff = train(GateFamily::FeedForward)?;
    Ok(GatePair { attn, ff, history })
}

/// Optimises `log_alpha` for one family against
/// `task_loss + lambda * sum P(gate active)` with the model weights frozen.
pub fn train_gate_family(
    model: &Model,
    data: &[QaExample],
    family: GateFamily,
    lambda: f32,
    objective: GateObjective,
    config: &GateTrainConfig,
) -> Result<(HardConcreteGates, Vec<GateTrainLog>)> {
    config.validate()?;
    if !model.is_frozen() {
        return Err(Error::contract("gate training requires a frozen model"));
    }
    if data.is_empty() {
        return Err(Error::contract("gate training needs a non-empty dataset"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::config(
            match family {
                GateFamily::Attention => "lambda_attn",
                GateFamily::FeedForward => "lambda_ff",
            },
            "must be >= 0",
        ));
    }
    if let GateObjective::Distillation { temperature, alpha } = objective {
        if !(temperature > 0.0) {
            return Err(Error::config("distill_temperature", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config("distill_alpha", "must lie in [0, 1]"));
        }
    }

    let sizes = model.sizes();
    let n_layers = model.layers.len();
    let family_sizes = family.sizes(&sizes).to_vec();
    let mut gates = HardConcreteGates::new(family, &family_sizes, config.init_log_alpha, config.params);
    let mut adam = Adam::new(config.learning_rate, family_sizes.iter().copied());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let per_epoch = data.len().div_ceil(config.batch_size);
    let total = (config.epochs as f64 * per_epoch as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(total);

    for step in 0..total {
        let pos = step % per_epoch;
        if pos == 0 {
            order.shuffle(&mut rng);
        }
        let idx = &order[pos * config.batch_size..((pos + 1) * config.batch_size).min(data.len())];
        let batch = QaBatch::from_examples(idx.iter().map(|&i| &data[i]))?;

        let mut g = Graph::new();
        let mv = model.bind(&mut g, false)?;
        let la_vars: Vec<Var> = gates
            .log_alpha
            .iter()
            .map(|la| g.param(Tensor::vector(la.clone())))
            .collect::<Result<_>>()?;
        let mut gv = GateVars::none(n_layers);
        for (l, &la) in la_vars.iter().enumerate() {
            let u: Vec<f32> = (0..family_sizes[l]).map(|_| rng.random()).collect();
            let z = sample_hard_concrete_var(&mut g, la, &u, &config.params)?;
            match family {
                GateFamily::Attention => gv.attn[l] = Some(z),
                GateFamily::FeedForward => gv.ff[l] = Some(z),
            }
        }
        let logits = forward(&mut g, &mv, &batch.token_ids, batch.batch, batch.seq, &gv)?;
        let task = match objective {
            GateObjective::CrossEntropy => qa_loss(&mut g, &logits, &batch.start_targets, &batch.end_targets)?,
            GateObjective::Distillation { temperature, alpha } => {
                let teacher = model.logits(&batch.token_ids, batch.batch, batch.seq, None)?;
                distillation_loss(
                    &mut g,
                    &logits,
                    &teacher,
                    &batch.start_targets,
                    &batch.end_targets,
                    temperature,
                    alpha,
                )?
            }
        };
        let mut total_loss = task;
        if lambda != 0.0 {
            for &la in &la_vars {
                let p = prob_gate_one_var(&mut g, la, &config.params, config.penalty)?;
                let s = g.sum(p)?;
                let s = g.scale(s, lambda)?;
                total_loss = g.add(total_loss, s)?;
            }
        }
        g.backward(total_loss).map_err(|e| diverged(e, step))?;
        let grads: Vec<Vec<f32>> = la_vars
            .iter()
            .map(|&v| g.grad(v).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
            .collect();
        adam.step(gates.log_alpha.iter_mut().map(Vec::as_mut_slice), &grads);
        if gates.log_alpha.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step,
                detail: "log_alpha became non-finite".into(),
            });
        }
        let expected_active = gates
            .log_alpha
            .iter()
            .flatten()
            .map(|&la| f64::from(config.penalty.probability(la, &config.params)))
            .sum();
        log.push(GateTrainLog {
            family,
            step,
            task_loss: f64::from(g.value(task).data()[0]),
            expected_active,
        });
    }
    Ok((gates, log))
}

fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}
