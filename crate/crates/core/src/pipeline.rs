//! The end-to-end prune pipeline: base model, gate selection, masks,
//! surgery, optional continued training, evaluation and timing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{benchmark_latency, LatencyConfig};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{generate_synthetic_task, split_fraction, SyntheticTaskConfig};
use crate::error::{Error, Result};
use crate::gates::{
    gain_scores, random_gates, threshold_family, train_gate_family, train_gates_l0, GainConfig, GateFamily, GateMask,
    GateObjective, GateTrainConfig, ImportanceScores, PenaltyWeights,
};
use crate::model::{build_model, count_flops, count_params, evaluate, Activation, Metrics, Model, QaExample, TransformerConfig};
use crate::report::{PruneReport, RunReport};
use crate::surgery::{payload_bytes, prune, retention, round_sizes};
use crate::train::{distill, retrain, train_task, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Random,
    Gain,
    L0,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Gain => "gain",
            Method::L0 => "l0",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Continuation {
    #[default]
    None,
    Retrain,
    Distill,
}

impl Continuation {
    pub fn name(self) -> &'static str {
        match self {
            Continuation::None => "none",
            Continuation::Retrain => "retrain",
            Continuation::Distill => "distill",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateObjectiveKind {
    #[default]
    CrossEntropy,
    Distillation,
}

/// Which gate families a run may prune; the others stay all ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Families {
    #[default]
    Both,
    Attention,
    FeedForward,
}

impl Families {
    pub fn includes(self, f: GateFamily) -> bool {
        match self {
            Families::Both => true,
            Families::Attention => f == GateFamily::Attention,
            Families::FeedForward => f == GateFamily::FeedForward,
        }
    }
}

/// Log-spaced penalty sweep used when no explicit weights are given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub min_lambda: f32,
    pub max_lambda: f32,
    pub points_per_decade: usize,
    /// The reference weight is the smallest grid value whose retained
    /// fraction is at or below this target.
    pub target_retained: f64,
    /// Examples used for each sweep point.
    pub max_examples: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            min_lambda: 1e-4,
            max_lambda: 10.0,
            points_per_decade: 2,
            target_retained: 0.9,
            max_examples: 1000,
        }
    }
}

impl CalibrationConfig {
    pub fn grid(&self) -> Vec<f32> {
        let lo = f64::from(self.min_lambda).log10();
        let hi = f64::from(self.max_lambda).log10();
        let steps = ((hi - lo) * self.points_per_decade as f64).round().max(0.0) as usize;
        (0..=steps)
            .map(|i| 10f64.powf(lo + i as f64 / self.points_per_decade as f64) as f32)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if !(self.min_lambda > 0.0) || !(self.max_lambda >= self.min_lambda) {
            return Err(Error::config("calibration", "needs 0 < min_lambda <= max_lambda"));
        }
        if self.points_per_decade == 0 {
            return Err(Error::config("calibration.points_per_decade", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.target_retained) {
            return Err(Error::config("calibration.target_retained", "must lie in [0, 1]"));
        }
        if self.max_examples == 0 {
            return Err(Error::config("calibration.max_examples", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: TransformerConfig,
    pub task: SyntheticTaskConfig,
    /// Training of the base model, one per seed.
    pub base_train: TrainConfig,
    /// Load the base model from here instead of training it.
    pub base_checkpoint: Option<PathBuf>,
    pub method: Method,
    pub families: Families,
    pub lambda_attn: Option<f32>,
    pub lambda_ff: Option<f32>,
    /// Multiplies calibrated weights.
    pub lambda_multiplier: f32,
    pub calibration: Option<CalibrationConfig>,
    /// Gain: fraction kept per family. L0: keep this fraction ranked by
    /// `log_alpha` instead of thresholding.
    pub keep_fraction: Option<f64>,
    pub bernoulli_p: Option<f64>,
    pub gate_objective: GateObjectiveKind,
    pub gate_train: GateTrainConfig,
    pub gain: GainConfig,
    /// Fraction of the training examples used to choose gates.
    pub gate_data_fraction: f64,
    /// When set, hold out the tail of the training data for evaluation
    /// instead of using the dev set.
    pub train_split: Option<f64>,
    pub rounding: usize,
    pub continuation: Continuation,
    pub continuation_train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Timing is skipped when absent.
    pub latency: Option<LatencyConfig>,
    pub out_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let task = SyntheticTaskConfig::default();
        Self {
            model: TransformerConfig {
                n_layers: 2,
                n_heads: 4,
                d_model: 64,
                d_ff: 128,
                vocab_size: task.vocab_size,
                max_seq_len: task.seq_len,
                activation: Activation::Gelu,
            },
            task,
            base_train: TrainConfig {
                learning_rate: 1e-3,
                epochs: 25.0,
                batch_size: 32,
                ..Default::default()
            },
            base_checkpoint: None,
            method: Method::Random,
            families: Families::Both,
            lambda_attn: None,
            lambda_ff: None,
            lambda_multiplier: 1.0,
            calibration: None,
            keep_fraction: None,
            bernoulli_p: Some(1.0),
            gate_objective: GateObjectiveKind::CrossEntropy,
            gate_train: GateTrainConfig::default(),
            gain: GainConfig::default(),
            gate_data_fraction: 1.0,
            train_split: None,
            rounding: 1,
            continuation: Continuation::None,
            continuation_train: TrainConfig {
                learning_rate: 5e-4,
                epochs: 2.0,
                batch_size: 32,
                ..Default::default()
            },
            seeds: vec![0],
            latency: None,
            out_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.base_train.validate()?;
        self.continuation_train.validate()?;
        self.gate_train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.model.vocab_size < self.task.vocab_size {
            return Err(Error::config("model.vocab_size", "smaller than the task vocabulary"));
        }
        if self.model.max_seq_len < self.task.seq_len {
            return Err(Error::config("model.max_seq_len", "shorter than the task sequences"));
        }
        let frac = |field: &'static str, v: Option<f64>| -> Result<()> {
            match v {
                Some(x) if !(0.0..=1.0).contains(&x) => Err(Error::config(field, "must lie in [0, 1]")),
                _ => Ok(()),
            }
        };
        frac("keep_fraction", self.keep_fraction)?;
        frac("bernoulli_p", self.bernoulli_p)?;
        frac("train_split", self.train_split)?;
        if !(self.gate_data_fraction > 0.0 && self.gate_data_fraction <= 1.0) {
            return Err(Error::config("gate_data_fraction", "must lie in (0, 1]"));
        }
        if self.rounding == 0 {
            return Err(Error::config("rounding", "must be at least 1"));
        }
        match self.method {
            Method::Random if self.bernoulli_p.is_none() => {
                return Err(Error::config("bernoulli_p", "required by method random"));
            }
            Method::Gain if self.keep_fraction.is_none() => {
                return Err(Error::config("keep_fraction", "required by method gain"));
            }
            Method::L0 => {
                let explicit = self.lambda_attn.is_some() && self.lambda_ff.is_some();
                if !explicit && self.calibration.is_none() {
                    return Err(Error::config(
                        "lambda_attn",
                        "method l0 needs lambda_attn and lambda_ff, or a calibration sweep",
                    ));
                }
                for (field, v) in [("lambda_attn", self.lambda_attn), ("lambda_ff", self.lambda_ff)] {
                    if let Some(l) = v {
                        if !(l >= 0.0) || !l.is_finite() {
                            return Err(Error::config(field, "must be a finite value >= 0"));
                        }
                    }
                }
                if !(self.lambda_multiplier >= 0.0) || !self.lambda_multiplier.is_finite() {
                    return Err(Error::config("lambda_multiplier", "must be a finite value >= 0"));
                }
                if let Some(c) = &self.calibration {
                    c.validate()?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: PathBuf::from("<config>"),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    fn gate_objective(&self) -> GateObjective {
        match self.gate_objective {
            GateObjectiveKind::CrossEntropy => GateObjective::CrossEntropy,
            GateObjectiveKind::Distillation => GateObjective::Distillation {
                temperature: self.continuation_train.distill_temperature,
                alpha: self.continuation_train.distill_alpha,
            },
        }
    }
}

/// Examples used for gates, continued training and evaluation.
#[derive(Clone, Debug)]
pub struct PipelineData {
    pub train: Vec<QaExample>,
    pub gate: Vec<QaExample>,
    pub eval: Vec<QaExample>,
}

pub fn prepare_data(cfg: &PipelineConfig) -> Result<PipelineData> {
    let task = generate_synthetic_task(&cfg.task)?;
    let (train, eval) = match cfg.train_split {
        Some(f) => split_fraction(&task.train, f),
        None => (task.train, task.dev),
    };
    if train.is_empty() || eval.is_empty() {
        return Err(Error::config("train_split", "leaves an empty train or evaluation set"));
    }
    let (gate, _) = split_fraction(&train, cfg.gate_data_fraction);
    if gate.is_empty() {
        return Err(Error::config("gate_data_fraction", "selects no examples"));
    }
    Ok(PipelineData { train, gate, eval })
}

/// Reference penalty weight for one family: the smallest grid value whose
/// thresholded retained fraction is at most the target. Returns the weight
/// and the sweep points `(lambda, retained)`.
pub fn calibrate_lambda(
    base: &Model,
    data: &[QaExample],
    family: GateFamily,
    objective: GateObjective,
    gate_cfg: &GateTrainConfig,
    cal: &CalibrationConfig,
) -> Result<(f32, Vec<(f32, f64)>)> {
    cal.validate()?;
    let data = &data[..data.len().min(cal.max_examples)];
    let mut sweep = Vec::new();
    for lambda in cal.grid() {
        let (gates, _) = train_gate_family(base, data, family, lambda, objective, gate_cfg)?;
        let (mask, _) = crate::gates::finalize_gates(&gates, gate_cfg.threshold);
        let total: usize = mask.iter().map(Vec::len).sum();
        let kept = mask.iter().flatten().filter(|&&v| v == 1.0).count();
        let retained = kept as f64 / total as f64;
        sweep.push((lambda, retained));
        if retained <= cal.target_retained {
            return Ok((lambda, sweep));
        }
    }
    let last = sweep.last().map_or(cal.max_lambda, |s| s.0);
    Ok((last, sweep))
}

/// Gate mask for one seed according to the configured method.
pub fn select_mask(
    cfg: &PipelineConfig,
    base: &Model,
    data: &[QaExample],
    seed: u64,
    lambdas: PenaltyWeights,
) -> Result<(GateMask, ImportanceScores)> {
    let sizes = base.sizes();
    let keep_family = |f: GateFamily| cfg.families.includes(f);
    let (mut mask, scores) = match cfg.method {
        Method::Random => {
            let p = cfg.bernoulli_p.expect("validated");
            let m = random_gates(&sizes, p, seed)?;
            let scores = ImportanceScores {
                attn: m.attn.clone(),
                ff: m.ff.clone(),
            };
            (m, scores)
        }
        Method::Gain => {
            let scores = gain_scores(base, data, cfg.gain)?;
            let keep = cfg.keep_fraction.expect("validated");
            let (attn, mut forced) = threshold_family(GateFamily::Attention, &scores.attn, keep);
            let (ff, f2) = threshold_family(GateFamily::FeedForward, &scores.ff, keep);
            forced.extend(f2);
            (GateMask { attn, ff, forced }, scores)
        }
        Method::L0 => {
            let weights = PenaltyWeights {
                lambda_attn: if keep_family(GateFamily::Attention) { lambdas.lambda_attn } else { 0.0 },
                lambda_ff: if keep_family(GateFamily::FeedForward) { lambdas.lambda_ff } else { 0.0 },
            };
            let gate_cfg = GateTrainConfig {
                seed,
                ..cfg.gate_train.clone()
            };
            let pair = train_gates_l0(base, data, &weights, cfg.gate_objective(), &gate_cfg)?;
            let mask = match cfg.keep_fraction {
                Some(k) => pair.mask_at_fraction(k),
                None => pair.mask(gate_cfg.threshold),
            };
            let scores = ImportanceScores {
                attn: pair.attn.log_alpha.clone(),
                ff: pair.ff.log_alpha.clone(),
            };
            (mask, scores)
        }
    };
    for f in [GateFamily::Attention, GateFamily::FeedForward] {
        if !keep_family(f) {
            for l in mask.family_mut(f) {
                l.iter_mut().for_each(|v| *v = 1.0);
            }
            mask.forced.retain(|u| u.family != f);
        }
    }
    Ok((mask, scores))
}

fn base_model(cfg: &PipelineConfig, seed: u64, data: &PipelineData) -> Result<Model> {
    match &cfg.base_checkpoint {
        Some(p) => Ok(crate::checkpoint::load_checkpoint(p)?.model.unfrozen()),
        None => {
            let m = build_model(&cfg.model, seed)?;
            let tc = TrainConfig {
                seed,
                ..cfg.base_train.clone()
            };
            Ok(train_task(&m, &data.train, &tc)?.model)
        }
    }
}

/// Runs every seed, training or loading its base model.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PruneReport> {
    run_pipeline_with(cfg, |seed, data| base_model(cfg, seed, data))
}

/// Like [`run_pipeline`] with a caller-supplied base model per seed.
pub fn run_pipeline_with(
    cfg: &PipelineConfig,
    mut base_for_seed: impl FnMut(u64, &PipelineData) -> Result<Model>,
) -> Result<PruneReport> {
    let result = (|| {
        cfg.validate()?;
        let data = prepare_data(cfg).map_err(|e| e.in_stage("data"))?;
        let mut lambdas = None;
        let mut calibration_warnings = Vec::new();
        let mut runs = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let base = base_for_seed(seed, &data).map_err(|e| e.in_stage("base_model"))?;
            if let Some(dir) = &cfg.out_dir {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                save_checkpoint(&dir.join(format!("base-{seed}.qapr")), &Checkpoint::model(base.clone()))
                    .map_err(|e| e.in_stage("base_model"))?;
            }
            let frozen = base.clone().frozen();
            if cfg.method == Method::L0 && lambdas.is_none() {
                let (l, w) = resolve_lambdas(cfg, &frozen, &data).map_err(|e| e.in_stage("calibration"))?;
                lambdas = Some(l);
                calibration_warnings = w;
            }
            let weights = lambdas.unwrap_or_default();
            runs.push(run_seed(cfg, seed, &frozen, &data, weights)?);
        }
        let mut report = PruneReport::new(cfg, lambdas.map(|l| l.1), runs);
        report.warnings.splice(0..0, calibration_warnings);
        if let Some(dir) = &cfg.out_dir {
            crate::report::emit_report(&report, dir).map_err(|e| e.in_stage("report"))?;
        }
        Ok(report)
    })();
    if let (Err(e), Some(dir)) = (&result, &cfg.out_dir) {
        write_failure_marker(dir, e);
    }
    result
}

/// `(weights used, reference weights)`.
type Lambdas = (PenaltyWeights, PenaltyWeights);

fn resolve_lambdas(cfg: &PipelineConfig, base: &Model, data: &PipelineData) -> Result<(Lambdas, Vec<String>)> {
    let mut warnings = Vec::new();
    let objective = cfg.gate_objective();
    let mut reference = PenaltyWeights {
        lambda_attn: cfg.lambda_attn.unwrap_or(0.0),
        lambda_ff: cfg.lambda_ff.unwrap_or(0.0),
    };
    if let Some(cal) = &cfg.calibration {
        for family in [GateFamily::Attention, GateFamily::FeedForward] {
            let explicit = match family {
                GateFamily::Attention => cfg.lambda_attn,
                GateFamily::FeedForward => cfg.lambda_ff,
            };
            if explicit.is_some() || !cfg.families.includes(family) {
                continue;
            }
            let (l, sweep) = calibrate_lambda(base, &data.gate, family, objective, &cfg.gate_train, cal)?;
            let reached = sweep.last().is_some_and(|s| s.1 <= cal.target_retained);
            if !reached {
                warnings.push(format!(
                    "{} calibration never reached retained fraction {}; using the largest grid value {l:.4e}",
                    family.name(),
                    cal.target_retained
                ));
            } else if sweep.len() == 1 {
                warnings.push(format!(
                    "{} calibration met retained fraction {} at the smallest grid value {l:.4e}; a smaller weight may suffice",
                    family.name(),
                    cal.target_retained
                ));
            }
            match family {
                GateFamily::Attention => reference.lambda_attn = l,
                GateFamily::FeedForward => reference.lambda_ff = l,
            }
        }
    }
    let used = PenaltyWeights {
        lambda_attn: reference.lambda_attn * cfg.lambda_multiplier,
        lambda_ff: reference.lambda_ff * cfg.lambda_multiplier,
    };
    Ok(((used, reference), warnings))
}

/// One seed of the pipeline on an already trained base model.
pub fn run_seed(
    cfg: &PipelineConfig,
    seed: u64,
    base: &Model,
    data: &PipelineData,
    lambdas: Lambdas,
) -> Result<RunReport> {
    let base = base.clone().frozen();
    let before = evaluate(&base, &data.eval, None).map_err(|e| e.in_stage("evaluate"))?;

    let (mask, scores) = select_mask(cfg, &base, &data.gate, seed, lambdas.0).map_err(|e| e.in_stage("gates"))?;
    let (mask, rounding) = round_sizes(&mask, cfg.rounding, &scores).map_err(|e| e.in_stage("rounding"))?;
    let pruned = prune(&base, &mask).map_err(|e| e.in_stage("surgery"))?;
    if let Some(dir) = &cfg.out_dir {
        let ckpt = Checkpoint {
            model: pruned.clone(),
            mask: Some(mask.clone()),
            gates: None,
        };
        save_checkpoint(&dir.join(format!("pruned-{seed}.qapr")), &ckpt).map_err(|e| e.in_stage("surgery"))?;
    }
    let after_prune = evaluate(&pruned, &data.eval, None).map_err(|e| e.in_stage("evaluate"))?;

    let continued = continue_training(cfg, seed, &base, &pruned, data).map_err(|e| e.in_stage("continuation"))?;
    let after_continuation: Option<Metrics> = match &continued {
        Some(m) => Some(evaluate(m, &data.eval, None).map_err(|e| e.in_stage("evaluate"))?),
        None => None,
    };
    let final_model = continued.as_ref().unwrap_or(&pruned);

    let latency = match &cfg.latency {
        Some(lc) => {
            let b = benchmark_latency(&base, lc).map_err(|e| e.in_stage("benchmark"))?;
            let a = benchmark_latency(final_model, lc).map_err(|e| e.in_stage("benchmark"))?;
            Some((b.median_seconds, a.median_seconds))
        }
        None => None,
    };
    let seq = cfg.task.seq_len;
    Ok(RunReport::new(
        seed,
        lambdas.0,
        retention(&base.sizes(), &pruned.sizes()),
        (count_params(&base), count_params(final_model)),
        (count_flops(&base, seq, 1).total(), count_flops(final_model, seq, 1).total()),
        (payload_bytes(&base), payload_bytes(final_model)),
        before,
        after_prune,
        after_continuation,
        latency,
        rounding,
        mask.forced.len(),
    ))
}

fn continue_training(
    cfg: &PipelineConfig,
    seed: u64,
    base: &Model,
    pruned: &Model,
    data: &PipelineData,
) -> Result<Option<Model>> {
    let tc = TrainConfig {
        seed,
        ..cfg.continuation_train.clone()
    };
    let student = pruned.clone().unfrozen();
    Ok(match cfg.continuation {
        Continuation::None => None,
        Continuation::Retrain => Some(retrain(&student, &data.train, &tc)?.model),
        Continuation::Distill => Some(distill(&student, base, &data.train, &tc)?.model),
    })
}

fn write_failure_marker(dir: &Path, e: &Error) {
    let stage = match e {
        Error::Stage { stage, .. } => stage,
        Error::Config { .. } => "config",
        _ => "pipeline",
    };
    let _ = fs::create_dir_all(dir);
    let _ = fs::write(dir.join("FAILED"), format!("stage: {stage}\ncause: {e}\n"));
}
