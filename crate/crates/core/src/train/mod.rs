//! Fine-tuning: the plain span objective, retraining after surgery, and
//! distillation from an unpruned teacher.

mod distill;
mod optim;

pub use distill::distillation_loss;
pub use optim::Adam;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, qa_loss, GateVars, Model, QaBatch, QaExample};
use crate::tensor::Graph;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    CrossEntropy,
    Distillation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    /// Fractional epochs are allowed; `0` leaves the model untouched.
    pub epochs: f32,
    pub grad_accumulation_steps: usize,
    pub seed: u64,
    pub objective: Objective,
    pub distill_temperature: f32,
    pub distill_alpha: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 24,
            epochs: 1.0,
            grad_accumulation_steps: 1,
            seed: 0,
            objective: Objective::CrossEntropy,
            distill_temperature: 2.0,
            distill_alpha: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate", "must be a positive number"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.epochs >= 0.0) || !self.epochs.is_finite() {
            return Err(Error::config("epochs", "must be >= 0"));
        }
        if self.grad_accumulation_steps == 0 {
            return Err(Error::config("grad_accumulation_steps", "must be at least 1"));
        }
        if !(self.distill_temperature > 0.0) {
            return Err(Error::config("distill_temperature", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.distill_alpha) {
            return Err(Error::config("distill_alpha", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Loss of one minibatch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<LossRecord>,
    /// Mean minibatch loss of each (possibly partial) epoch.
    pub epoch_means: Vec<f64>,
}

/// Loss history as CSV rows `step,epoch,loss`.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,epoch,loss\n");
    for r in history {
        out.push_str(&format!("{},{},{:.6}\n", r.step, r.epoch, r.loss));
    }
    out
}

/// Fine-tunes every weight on the span objective.
pub fn train_task(model: &Model, data: &[QaExample], config: &TrainConfig) -> Result<TrainOutcome> {
    if config.objective == Objective::Distillation {
        return Err(Error::contract("train_task uses the span objective; call distill instead"));
    }
    run(model, data, config, None)
}

/// Continues training a pruned model on the span objective.
pub fn retrain(model: &Model, data: &[QaExample], config: &TrainConfig) -> Result<TrainOutcome> {
    train_task(model, data, config)
}

/// Trains `student` against the soft targets of `teacher` mixed with the hard
/// span targets.
pub fn distill(
    student: &Model,
    teacher: &Model,
    data: &[QaExample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if student.config.vocab_size != teacher.config.vocab_size {
        return Err(Error::contract(format!(
            "student vocabulary {} differs from teacher vocabulary {}",
            student.config.vocab_size, teacher.config.vocab_size
        )));
    }
    if student.config.max_seq_len != teacher.config.max_seq_len {
        return Err(Error::contract(format!(
            "student max_seq_len {} differs from teacher max_seq_len {}",
            student.config.max_seq_len, teacher.config.max_seq_len
        )));
    }
    run(student, data, config, Some(teacher))
}

fn run(model: &Model, data: &[QaExample], config: &TrainConfig, teacher: Option<&Model>) -> Result<TrainOutcome> {
    config.validate()?;
    if model.is_frozen() {
        return Err(Error::contract("cannot train a frozen model"));
    }
    if data.is_empty() {
        return Err(Error::contract("training needs a non-empty dataset"));
    }
    let mut model = model.clone();
    let mut adam = Adam::new(
        config.learning_rate,
        model.named_tensors().iter().map(|(_, t)| t.len()),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let per_epoch = data.len().div_ceil(config.batch_size);
    let total = (config.epochs as f64 * per_epoch as f64).ceil() as usize;
    let accum = config.grad_accumulation_steps;

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(total);
    let mut grads: Vec<Vec<f32>> = Vec::new();
    let mut pending = 0usize;

    for step in 0..total {
        let pos = step % per_epoch;
        if pos == 0 {
            order.shuffle(&mut rng);
        }
        let idx = &order[pos * config.batch_size..((pos + 1) * config.batch_size).min(data.len())];
        let batch = QaBatch::from_examples(idx.iter().map(|&i| &data[i]))?;

        let (loss, step_grads) = batch_gradients(&model, &batch, config, teacher)
            .map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged {
                    step,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
        history.push(LossRecord {
            step,
            epoch: step / per_epoch,
            loss,
        });
        if grads.is_empty() {
            grads = step_grads;
        } else {
            for (acc, g) in grads.iter_mut().zip(&step_grads) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        pending += 1;
        if pending == accum || step + 1 == total {
            let k = pending as f32;
            grads.iter_mut().flatten().for_each(|g| *g /= k);
            adam.step(model.tensors_mut().into_iter().map(|t| t.data_mut()), &grads);
            grads.clear();
            pending = 0;
        }
    }

    let epoch_means = epoch_means(&history);
    Ok(TrainOutcome {
        model,
        history,
        epoch_means,
    })
}

fn batch_gradients(
    model: &Model,
    batch: &QaBatch,
    config: &TrainConfig,
    teacher: Option<&Model>,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut g = Graph::new();
    let mv = model.bind(&mut g, true)?;
    let gates = GateVars::none(model.layers.len());
    let logits = forward(&mut g, &mv, &batch.token_ids, batch.batch, batch.seq, &gates)?;
    let loss = match teacher {
        None => qa_loss(&mut g, &logits, &batch.start_targets, &batch.end_targets)?,
        Some(t) => {
            let tl = t.logits(&batch.token_ids, batch.batch, batch.seq, None)?;
            distillation_loss(
                &mut g,
                &logits,
                &tl,
                &batch.start_targets,
                &batch.end_targets,
                config.distill_temperature,
                config.distill_alpha,
            )?
        }
    };
    g.backward(loss)?;
    let value = f64::from(g.value(loss).data()[0]);
    let grads = mv
        .all
        .iter()
        .map(|&v| match g.grad(v) {
            Some(t) => t.into_data(),
            None => vec![0.0; g.value(v).len()],
        })
        .collect();
    Ok((value, grads))
}

fn epoch_means(history: &[LossRecord]) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for r in history {
        if out.len() <= r.epoch {
            out.resize(r.epoch + 1, (0.0, 0));
        }
        out[r.epoch].0 += r.loss;
        out[r.epoch].1 += 1;
    }
    out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}
