//! `qaprune` command-line runner.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 when a stage
//! fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use qaprune::bench::{benchmark_latency, LatencyConfig};
use qaprune::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use qaprune::data::{generate_synthetic_task, read_jsonl, write_jsonl};
use qaprune::model::{build_model, evaluate, QaExample};
use qaprune::pipeline::{
    prepare_data, run_pipeline, select_mask, Continuation, GateObjectiveKind, Method, PipelineConfig,
};
use qaprune::report::{emit_report, PruneReport};
use qaprune::surgery::{prune, retention, round_sizes};
use qaprune::train::{distill, history_csv, retrain, train_task, TrainConfig, TrainOutcome};
use qaprune::{Error, Result};

#[derive(Parser)]
#[command(name = "qaprune", version, about = "Structured pruning of span-extraction transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train and dev sets as JSON lines.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a base model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Choose gates for a trained model and cut them out.
    Prune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: PruneFlags,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Continue training a pruned model on the span objective.
    Retrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Continue training a pruned model against an unpruned teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time batch inference of a checkpoint.
    Benchmark {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        batch_size: usize,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long, default_value_t = 300)]
        examples: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Run the full pipeline for every seed and write the report.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: PruneFlags,
        #[arg(long, value_enum)]
        continuation: Option<ContinuationArg>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Hold out the tail of the training data for evaluation.
        #[arg(long)]
        train_split: Option<f64>,
        #[arg(long)]
        latency: bool,
    },
    /// Rewrite the CSV tables of a JSON report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML pipeline configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PruneFlags {
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    lambda_attn: Option<f32>,
    #[arg(long)]
    lambda_ff: Option<f32>,
    #[arg(long)]
    keep_fraction: Option<f64>,
    #[arg(long)]
    bernoulli_p: Option<f64>,
    #[arg(long, value_enum)]
    gate_objective: Option<GateObjectiveArg>,
    /// Round per-layer sizes to a multiple of this.
    #[arg(long = "round")]
    rounding: Option<usize>,
    #[arg(long)]
    gate_data_fraction: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Random,
    Gain,
    L0,
}

#[derive(Clone, Copy, ValueEnum)]
enum GateObjectiveArg {
    Ce,
    Distill,
}

#[derive(Clone, Copy, ValueEnum)]
enum ContinuationArg {
    None,
    Retrain,
    Distill,
}

impl PruneFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(m) = self.method {
            cfg.method = match m {
                MethodArg::Random => Method::Random,
                MethodArg::Gain => Method::Gain,
                MethodArg::L0 => Method::L0,
            };
        }
        if self.lambda_attn.is_some() {
            cfg.lambda_attn = self.lambda_attn;
        }
        if self.lambda_ff.is_some() {
            cfg.lambda_ff = self.lambda_ff;
        }
        if self.keep_fraction.is_some() {
            cfg.keep_fraction = self.keep_fraction;
        }
        if self.bernoulli_p.is_some() {
            cfg.bernoulli_p = self.bernoulli_p;
        }
        if let Some(o) = self.gate_objective {
            cfg.gate_objective = match o {
                GateObjectiveArg::Ce => GateObjectiveKind::CrossEntropy,
                GateObjectiveArg::Distill => GateObjectiveKind::Distillation,
            };
        }
        if let Some(r) = self.rounding {
            cfg.rounding = r;
        }
        if let Some(f) = self.gate_data_fraction {
            cfg.gate_data_fraction = f;
        }
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    match &common.config {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn required_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::Config {
            field: "out",
            reason: "this command needs --out".into(),
        })
}

fn train_data(cfg: &PipelineConfig, path: Option<&Path>) -> Result<Vec<QaExample>> {
    match path {
        Some(p) => read_jsonl(p),
        None => Ok(prepare_data(cfg)?.train),
    }
}

fn save_trained(out: &Path, outcome: &TrainOutcome) -> Result<()> {
    save_checkpoint(out, &Checkpoint::model(outcome.model.clone()))?;
    let csv = out.with_extension("loss.csv");
    fs::write(&csv, history_csv(&outcome.history)).map_err(|e| Error::Io { path: csv, source: e })
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let out = required_out(&common)?;
            let task = generate_synthetic_task(&cfg.task)?;
            fs::create_dir_all(out).map_err(|e| Error::Io {
                path: out.to_path_buf(),
                source: e,
            })?;
            write_jsonl(&out.join("train.jsonl"), &task.train)?;
            write_jsonl(&out.join("dev.jsonl"), &task.dev)?;
            println!("wrote {} train and {} dev examples to {}", task.train.len(), task.dev.len(), out.display());
        }
        Command::Train { common, data, seed } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            let out = required_out(&common)?;
            let data = train_data(&cfg, data.as_deref())?;
            let model = build_model(&cfg.model, seed)?;
            let tc = TrainConfig {
                seed,
                ..cfg.base_train.clone()
            };
            let outcome = train_task(&model, &data, &tc).map_err(|e| e.in_stage("train"))?;
            save_trained(out, &outcome)?;
            println!("final epoch loss {:.4}", outcome.epoch_means.last().copied().unwrap_or(f64::NAN));
        }
        Command::Prune {
            common,
            flags,
            model,
            seed,
        } => {
            let mut cfg = load_config(&common)?;
            flags.apply(&mut cfg);
            cfg.validate()?;
            let out = required_out(&common)?;
            let base = load_checkpoint(&model)?.model.frozen();
            let data = prepare_data(&cfg)?;
            let weights = qaprune::gates::PenaltyWeights {
                lambda_attn: cfg.lambda_attn.unwrap_or(0.0),
                lambda_ff: cfg.lambda_ff.unwrap_or(0.0),
            };
            let (mask, scores) =
                select_mask(&cfg, &base, &data.gate, seed, weights).map_err(|e| e.in_stage("gates"))?;
            let (mask, _) = round_sizes(&mask, cfg.rounding, &scores).map_err(|e| e.in_stage("rounding"))?;
            let pruned = prune(&base, &mask).map_err(|e| e.in_stage("surgery"))?;
            let metrics = evaluate(&pruned, &data.eval, None)?;
            print_json(&retention(&base.sizes(), &pruned.sizes()));
            print_json(&metrics);
            let ckpt = Checkpoint {
                model: pruned,
                mask: Some(mask),
                gates: None,
            };
            save_checkpoint(out, &ckpt)?;
        }
        Command::Retrain {
            common,
            model,
            data,
            seed,
        } => {
            let cfg = load_config(&common)?;
            let out = required_out(&common)?;
            let student = load_checkpoint(&model)?.model.unfrozen();
            let data = train_data(&cfg, data.as_deref())?;
            let tc = TrainConfig {
                seed,
                ..cfg.continuation_train.clone()
            };
            let outcome = retrain(&student, &data, &tc).map_err(|e| e.in_stage("continuation"))?;
            save_trained(out, &outcome)?;
        }
        Command::Distill {
            common,
            model,
            teacher,
            data,
            seed,
        } => {
            let cfg = load_config(&common)?;
            let out = required_out(&common)?;
            let student = load_checkpoint(&model)?.model.unfrozen();
            let teacher = load_checkpoint(&teacher)?.model;
            let data = train_data(&cfg, data.as_deref())?;
            let tc = TrainConfig {
                seed,
                ..cfg.continuation_train.clone()
            };
            let outcome = distill(&student, &teacher, &data, &tc).map_err(|e| e.in_stage("continuation"))?;
            save_trained(out, &outcome)?;
        }
        Command::Benchmark {
            model,
            batch_size,
            seq_len,
            examples,
            repeats,
        } => {
            let m = load_checkpoint(&model)?.model;
            let lc = LatencyConfig {
                batch_size,
                seq_len: seq_len.unwrap_or(m.config.max_seq_len),
                n_examples: examples,
                repeats,
                seed: 0,
            };
            print_json(&benchmark_latency(&m, &lc).map_err(|e| e.in_stage("benchmark"))?);
        }
        Command::Pipeline {
            common,
            flags,
            continuation,
            seeds,
            train_split,
            latency,
        } => {
            let mut cfg = load_config(&common)?;
            flags.apply(&mut cfg);
            if let Some(c) = continuation {
                cfg.continuation = match c {
                    ContinuationArg::None => Continuation::None,
                    ContinuationArg::Retrain => Continuation::Retrain,
                    ContinuationArg::Distill => Continuation::Distill,
                };
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if train_split.is_some() {
                cfg.train_split = train_split;
            }
            if latency && cfg.latency.is_none() {
                cfg.latency = Some(LatencyConfig {
                    seq_len: cfg.task.seq_len,
                    n_examples: cfg.task.n_dev,
                    ..Default::default()
                });
            }
            if common.out.is_some() {
                cfg.out_dir = common.out.clone();
            }
            let report = run_pipeline(&cfg)?;
            print_json(&report.aggregate);
        }
        Command::Report { input, out } => {
            let text = fs::read_to_string(&input).map_err(|e| Error::Io {
                path: input.clone(),
                source: e,
            })?;
            let report = PruneReport::from_json(&text)?;
            emit_report(&report, &out)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Parse { .. } => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
