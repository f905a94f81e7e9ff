//! Pipeline reports and their JSON/CSV emission.
//!
//! Every float is rounded to 4 decimals when the report is built, so the
//! JSON file and the CSV tables carry the same values.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::PenaltyWeights;
use crate::model::Metrics;
use crate::pipeline::PipelineConfig;
use crate::surgery::{RetentionRecord, RoundingChange};

/// How FLOPs are counted, recorded in every report.
pub const FLOP_FORMULA: &str = "per layer with h heads of width d, f ff units, E = d_model, T = b*s tokens: \
attention = 2*T*E*h*d*3 + 2*T*h*d*E + 2*b*h*s^2*d*2; feed-forward = 2*T*E*f*2; \
embeddings, layer norms, softmax and the span head excluded; b = 1, s = task sequence length";

/// Four significant digits, for penalty weights that are often below 1e-3.
fn round_sig4(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let scale = 10f64.powi(3 - x.abs().log10().floor() as i32);
    (x * scale).round() / scale
}

pub fn round4(x: f64) -> f64 {
    let r = (x * 1e4).round() / 1e4;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub exact_match: f64,
    pub start_acc: f64,
    pub end_acc: f64,
    pub loss: f64,
}

impl From<Metrics> for StageMetrics {
    fn from(m: Metrics) -> Self {
        Self {
            exact_match: round4(m.span_exact_match),
            start_acc: round4(m.start_acc),
            end_acc: round4(m.end_acc),
            loss: round4(m.mean_loss),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub lambda_attn: f64,
    pub lambda_ff: f64,
    pub attn_removed_pct: f64,
    pub ff_removed_pct: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub flops_before: u64,
    pub flops_after: u64,
    pub bytes_before: usize,
    pub bytes_after: usize,
    pub latency_before: Option<f64>,
    pub latency_after: Option<f64>,
    pub before: StageMetrics,
    pub pruned: StageMetrics,
    pub continued: Option<StageMetrics>,
    pub rounding_change_attn: f64,
    pub rounding_change_ff: f64,
    pub forced_units: usize,
    pub retention: Vec<RetentionRecord>,
}

fn removed_pct(before: usize, after: usize) -> f64 {
    if before == 0 {
        0.0
    } else {
        round4(100.0 * (1.0 - after as f64 / before as f64))
    }
}

impl RunReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        seed: u64,
        lambdas: PenaltyWeights,
        retention: Vec<RetentionRecord>,
        params: (usize, usize),
        flops: (u64, u64),
        bytes: (usize, usize),
        before: Metrics,
        pruned: Metrics,
        continued: Option<Metrics>,
        latency: Option<(f64, f64)>,
        rounding: RoundingChange,
        forced_units: usize,
    ) -> Self {
        let heads: (usize, usize) = retention
            .iter()
            .fold((0, 0), |acc, r| (acc.0 + r.heads_before, acc.1 + r.heads_after));
        let ff: (usize, usize) = retention
            .iter()
            .fold((0, 0), |acc, r| (acc.0 + r.ff_before, acc.1 + r.ff_after));
        Self {
            seed,
            lambda_attn: round_sig4(f64::from(lambdas.lambda_attn)),
            lambda_ff: round_sig4(f64::from(lambdas.lambda_ff)),
            attn_removed_pct: removed_pct(heads.0, heads.1),
            ff_removed_pct: removed_pct(ff.0, ff.1),
            params_before: params.0,
            params_after: params.1,
            flops_before: flops.0,
            flops_after: flops.1,
            bytes_before: bytes.0,
            bytes_after: bytes.1,
            latency_before: latency.map(|l| round4(l.0)),
            latency_after: latency.map(|l| round4(l.1)),
            before: before.into(),
            pruned: pruned.into(),
            continued: continued.map(Into::into),
            rounding_change_attn: round4(rounding.attn),
            rounding_change_ff: round4(rounding.ff),
            forced_units,
            retention,
        }
    }

    /// Exact match of the final model.
    pub fn final_exact_match(&self) -> f64 {
        self.continued.unwrap_or(self.pruned).exact_match
    }
}

/// Median and `max - min` over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub spread: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let mid = v.len() / 2;
        let median = if v.len() % 2 == 1 {
            v[mid]
        } else {
            0.5 * (v[mid - 1] + v[mid])
        };
        Some(Self {
            median: round4(median),
            spread: round4(v[v.len() - 1] - v[0]),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub attn_removed_pct: Spread,
    pub ff_removed_pct: Spread,
    pub params_after: Spread,
    pub flops_after: Spread,
    pub bytes_after: Spread,
    pub exact_match_before: Spread,
    pub exact_match_pruned: Spread,
    pub exact_match_continued: Option<Spread>,
    pub latency_before: Option<Spread>,
    pub latency_after: Option<Spread>,
}

impl Aggregate {
    fn new(runs: &[RunReport]) -> Option<Self> {
        let col = |f: &dyn Fn(&RunReport) -> f64| Spread::of(&runs.iter().map(f).collect::<Vec<_>>());
        let opt = |f: &dyn Fn(&RunReport) -> Option<f64>| {
            runs.iter().map(f).collect::<Option<Vec<_>>>().and_then(|v| Spread::of(&v))
        };
        Some(Self {
            attn_removed_pct: col(&|r| r.attn_removed_pct)?,
            ff_removed_pct: col(&|r| r.ff_removed_pct)?,
            params_after: col(&|r| r.params_after as f64)?,
            flops_after: col(&|r| r.flops_after as f64)?,
            bytes_after: col(&|r| r.bytes_after as f64)?,
            exact_match_before: col(&|r| r.before.exact_match)?,
            exact_match_pruned: col(&|r| r.pruned.exact_match)?,
            exact_match_continued: opt(&|r| r.continued.map(|c| c.exact_match)),
            latency_before: opt(&|r| r.latency_before),
            latency_after: opt(&|r| r.latency_after),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub method: String,
    pub continuation: String,
    /// Reference penalty weights; run weights are these times the multiplier.
    pub reference_lambda_attn: Option<f64>,
    pub reference_lambda_ff: Option<f64>,
    pub lambda_multiplier: f64,
    pub n_layers: usize,
    pub flop_formula: String,
    pub warnings: Vec<String>,
    pub runs: Vec<RunReport>,
    pub aggregate: Option<Aggregate>,
}

impl PruneReport {
    pub fn new(cfg: &PipelineConfig, reference: Option<PenaltyWeights>, runs: Vec<RunReport>) -> Self {
        let warnings = runs
            .iter()
            .filter(|r| r.forced_units > 0)
            .map(|r| format!("seed {}: {} unit(s) force-retained to keep layers non-empty", r.seed, r.forced_units))
            .collect();
        Self {
            method: cfg.method.name().to_owned(),
            continuation: cfg.continuation.name().to_owned(),
            reference_lambda_attn: reference.map(|w| round_sig4(f64::from(w.lambda_attn))),
            reference_lambda_ff: reference.map(|w| round_sig4(f64::from(w.lambda_ff))),
            lambda_multiplier: round4(f64::from(cfg.lambda_multiplier)),
            n_layers: cfg.model.n_layers,
            flop_formula: FLOP_FORMULA.to_owned(),
            warnings,
            aggregate: Aggregate::new(&runs),
            runs,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<report>".into(),
            reason: e.to_string(),
        })
    }
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

fn opt4(x: Option<f64>) -> String {
    x.map(f4).unwrap_or_default()
}

pub const SUMMARY_COLUMNS: &[&str] = &[
    "seed",
    "method",
    "continuation",
    "lambda_attn",
    "lambda_ff",
    "attn_removed_pct",
    "ff_removed_pct",
    "params_before",
    "params_after",
    "flops_before",
    "flops_after",
    "bytes_before",
    "bytes_after",
    "latency_before",
    "latency_after",
    "em_before",
    "em_pruned",
    "em_continued",
];

pub const RETENTION_COLUMNS: &[&str] = &[
    "seed",
    "layer",
    "heads_before",
    "heads_after",
    "ff_before",
    "ff_after",
    "heads_retained_pct",
    "ff_retained_pct",
];

pub const ACCURACY_COLUMNS: &[&str] = &["seed", "stage", "params", "exact_match"];

pub fn summary_csv(report: &PruneReport) -> String {
    let mut out = SUMMARY_COLUMNS.join(",");
    out.push('\n');
    for r in &report.runs {
        let row = [
            r.seed.to_string(),
            report.method.clone(),
            report.continuation.clone(),
            r.lambda_attn.to_string(),
            r.lambda_ff.to_string(),
            f4(r.attn_removed_pct),
            f4(r.ff_removed_pct),
            r.params_before.to_string(),
            r.params_after.to_string(),
            r.flops_before.to_string(),
            r.flops_after.to_string(),
            r.bytes_before.to_string(),
            r.bytes_after.to_string(),
            opt4(r.latency_before),
            opt4(r.latency_after),
            f4(r.before.exact_match),
            f4(r.pruned.exact_match),
            opt4(r.continued.map(|c| c.exact_match)),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn retention_csv(report: &PruneReport) -> String {
    let mut out = RETENTION_COLUMNS.join(",");
    out.push('\n');
    for run in &report.runs {
        for r in &run.retention {
            let pct = |after: usize, before: usize| f4(round4(100.0 * after as f64 / before as f64));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                run.seed,
                r.layer,
                r.heads_before,
                r.heads_after,
                r.ff_before,
                r.ff_after,
                pct(r.heads_after, r.heads_before),
                pct(r.ff_after, r.ff_before),
            );
        }
    }
    out
}

/// Accuracy against parameter count, one point per run and stage.
pub fn accuracy_csv(report: &PruneReport) -> String {
    let mut out = ACCURACY_COLUMNS.join(",");
    out.push('\n');
    for r in &report.runs {
        let mut rows = vec![("before", r.params_before, r.before.exact_match), ("pruned", r.params_after, r.pruned.exact_match)];
        if let Some(c) = r.continued {
            rows.push(("continued", r.params_after, c.exact_match));
        }
        for (stage, params, em) in rows {
            let _ = writeln!(out, "{},{stage},{params},{}", r.seed, f4(em));
        }
    }
    out
}

pub const REPORT_JSON: &str = "report.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const RETENTION_CSV: &str = "retention.csv";
pub const ACCURACY_CSV: &str = "accuracy_params.csv";

/// Writes the JSON report and the three CSV tables into `dir`.
pub fn emit_report(report: &PruneReport, dir: &Path) -> Result<()> {
    if report.runs.is_empty() {
        return Err(Error::contract("a report needs at least one run"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        (REPORT_JSON, report.to_json()),
        (SUMMARY_CSV, summary_csv(report)),
        (RETENTION_CSV, retention_csv(report)),
        (ACCURACY_CSV, accuracy_csv(report)),
    ];
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
