//! The `at2` command-line tool.

pub mod config;
pub mod dataset;
pub mod render;
pub mod segment;

use std::path::{Path, PathBuf};

use at2_core::ablation::AblationPlan;
use at2_core::at2::{coefficients_csv, train_at2, ThetaDocument};
use at2_core::metrics::{evaluate_suite, LdsAblations, Metric};
use at2_core::prune::prune_eval;
use at2_core::trace::{canonical_json, export_trace, read_plan, write_atomic, write_plan};
use at2_core::{Error, ExampleText, Method, NamedMethod};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use crate::config::CliConfig;
use crate::dataset::{generate_planted, generate_toy, write_truth, DatasetFile, Generator};
use crate::render::{render, Format, ScoresFile};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(_) => 1,
        }
    }

    /// One-line message naming the error kind, e.g. `error: FormatError: ...`.
    pub fn message(&self) -> String {
        match self {
            CliError::Usage(m) => format!("usage error: {m}"),
            CliError::Core(e) => format!("error: {}: {e}", e.kind()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "at2", version, about = "Learned attention-based token attribution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config file; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<CliConfig> {
        CliConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Kind {
    Planted,
    Toy,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RenderFormat {
    Ansi,
    Html,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted or toy dataset directory.
    GenData {
        #[arg(long, value_enum)]
        kind: Kind,
        #[command(flatten)]
        config: ConfigArgs,
        /// Number of examples (default: `n_examples` from the config).
        #[arg(long)]
        n: Option<usize>,
        /// Generator seed (default: the planted or toy_data seed in the config).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the explicit ablation vectors for every (example, target).
    PlanAblations {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 32)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn head coefficients and write theta.json.
    TrainAt2 {
        #[arg(long)]
        data: PathBuf,
        /// live, toy, planted or trace:DIR.
        #[arg(long, default_value = "live")]
        backend: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV of the per-step training loss.
        #[arg(long)]
        loss_curve: Option<PathBuf>,
    },
    /// Score the sources of one example.
    Attribute {
        /// at2:THETA.json, avg-attn, esm[:M] or grad-l1.
        #[arg(long)]
        method: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        example: String,
        #[arg(long, default_value_t = 0)]
        target: usize,
        #[arg(long, default_value = "live")]
        backend: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate methods with top-k drop and LDS.
    Eval {
        /// Comma-separated method specs.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        /// topk[:K], lds[:M] or lds:recorded; repeatable.
        #[arg(long = "metric", required = true)]
        metrics: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "live")]
        backend: String,
        #[command(flatten)]
        config: ConfigArgs,
        /// Evaluation seed (default: eval.seed in the config).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-(method, metric) summary CSV.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Keep the top-k sources per method and score the shortened inputs.
    Prune {
        #[arg(long, alias = "method", value_delimiter = ',', required = true)]
        methods: Vec<String>,
        #[arg(long = "k", required = true)]
        ks: Vec<usize>,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a plan on the dataset's live backend and write a trace.
    ExportTrace {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a scores file for a terminal or a browser.
    Render {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, value_enum)]
        format: RenderFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump learned coefficients as layer,head,value rows.
    Coeffs {
        #[arg(long)]
        theta: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a text file into sentence sources (byte offsets).
    Segment {
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::json(path, e))?)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    Ok(write_atomic(path, contents.as_bytes())?)
}

/// Parses `at2:PATH`, `avg-attn`, `esm`, `esm:M` or `grad-l1`.
pub fn parse_method(spec: &str, config: &CliConfig) -> Result<NamedMethod> {
    let method = match spec.split_once(':') {
        Some(("at2", path)) => {
            let doc: ThetaDocument = read_json(Path::new(path))?;
            Method::At2(doc.coefficients()?)
        }
        Some(("esm", m)) => Method::Esm {
            m: m.parse()
                .map_err(|_| CliError::Usage(format!("bad ESM sample count in {spec:?}")))?,
            lambda: config.eval.esm_lambda,
        },
        None if spec == "avg-attn" => Method::AverageAttention,
        None if spec == "grad-l1" => Method::GradientL1,
        None if spec == "esm" => Method::Esm {
            m: config.eval.esm_m,
            lambda: config.eval.esm_lambda,
        },
        _ => {
            return Err(CliError::Usage(format!(
                "unknown method {spec:?}; expected at2:THETA.json, avg-attn, esm[:M] or grad-l1"
            )))
        }
    };
    Ok(NamedMethod::new(method))
}

fn parse_methods(specs: &[String], config: &CliConfig) -> Result<Vec<NamedMethod>> {
    let methods = specs
        .iter()
        .map(|s| parse_method(s, config))
        .collect::<Result<Vec<_>>>()?;
    for (i, m) in methods.iter().enumerate() {
        if methods[..i].iter().any(|o| o.name == m.name) {
            return Err(CliError::Usage(format!("method {} given twice", m.name)));
        }
    }
    Ok(methods)
}

/// Parses `topk`, `topk:K`, `lds`, `lds:M` or `lds:recorded`.
pub fn parse_metric(spec: &str, config: &CliConfig) -> Result<Metric> {
    let bad = || CliError::Usage(format!("unknown metric {spec:?}"));
    match spec.split_once(':') {
        None if spec == "topk" => Ok(Metric::TopKDrop(config.eval.top_k)),
        None if spec == "lds" => Ok(Metric::Lds(LdsAblations::Sampled(config.eval.lds_m))),
        Some(("topk", k)) => Ok(Metric::TopKDrop(k.parse().map_err(|_| bad())?)),
        Some(("lds", "recorded")) => Ok(Metric::Lds(LdsAblations::Recorded)),
        Some(("lds", m)) => Ok(Metric::Lds(LdsAblations::Sampled(m.parse().map_err(|_| bad())?))),
        _ => Err(bad()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            kind,
            config,
            n,
            seed,
            out,
        } => {
            let mut config = config.load()?;
            let n = n.unwrap_or(config.n_examples);
            match kind {
                Kind::Planted => {
                    if let Some(s) = seed {
                        config.planted.seed = s;
                    }
                    let (file, truth) = generate_planted(&config.planted, n)?;
                    file.write(&out)?;
                    write_truth(&out, &truth)?;
                }
                Kind::Toy => {
                    if let Some(s) = seed {
                        config.toy_data.seed = s;
                    }
                    let file = generate_toy(&config.toy, &config.toy_data, config.train.mask_mode, n)?;
                    file.write(&out)?;
                }
            }
        }
        Command::PlanAblations { data, m, seed, out } => {
            let file = DatasetFile::read(&data)?;
            write_plan(&AblationPlan::generate(&file.examples, m, seed), &out)?;
        }
        Command::TrainAt2 {
            data,
            backend,
            config,
            out,
            loss_curve,
        } => {
            let config = config.load()?;
            let file = DatasetFile::read(&data)?;
            if let Generator::Toy { mask_mode, .. } = &file.generator {
                if *mask_mode != config.train.mask_mode && !backend.starts_with("trace:") {
                    return Err(Error::InvalidConfig(format!(
                        "train.mask_mode {:?} differs from the dataset's {:?}",
                        config.train.mask_mode, mask_mode
                    ))
                    .into());
                }
            }
            let model = file.backend(&backend)?;
            let art = train_at2(&file.examples, model.as_ref(), &config.train)?;
            write(&out, &ThetaDocument::new(&art.theta, &config.train).to_canonical_json())?;
            if let Some(path) = loss_curve {
                let mut csv = String::from("step,loss\n");
                for (i, l) in art.loss_curve.iter().enumerate() {
                    csv.push_str(&format!("{i},{l}\n"));
                }
                write(&path, &csv)?;
            }
        }
        Command::Attribute {
            method,
            data,
            example,
            target,
            backend,
            config,
            out,
        } => {
            let config = config.load()?;
            let file = DatasetFile::read(&data)?;
            let model = file.backend(&backend)?;
            let ex = file.example(&example)?;
            let method = parse_method(&method, &config)?;
            let tau = method
                .method
                .attribute(model.as_ref(), ex, target, config.eval.seed)?;
            let scores = ScoresFile::new(ex, target, &method.name, tau.0);
            write(&out, &canonical_json(&scores))?;
        }
        Command::Eval {
            methods,
            metrics,
            data,
            backend,
            config,
            seed,
            out,
            summary,
        } => {
            let config = config.load()?;
            let file = DatasetFile::read(&data)?;
            let model = file.backend(&backend)?;
            let methods = parse_methods(&methods, &config)?;
            let metrics = metrics
                .iter()
                .map(|m| parse_metric(m, &config))
                .collect::<Result<Vec<_>>>()?;
            let seed = seed.unwrap_or(config.eval.seed);
            let report = evaluate_suite(&file.examples, model.as_ref(), &methods, &metrics, seed)?;
            write(&out, &report.to_csv())?;
            if let Some(path) = summary {
                write(&path, &report.summary_csv())?;
            }
        }
        Command::Prune {
            methods,
            ks,
            data,
            config,
            seed,
            out,
        } => {
            let config = config.load()?;
            let file = DatasetFile::read(&data)?;
            let model = file.live_backend()?;
            let methods = parse_methods(&methods, &config)?;
            let seed = seed.unwrap_or(config.eval.seed);
            let table = prune_eval(model.as_ref(), &file.examples, &methods, &ks, seed)?;
            write(&out, &table.to_csv())?;
        }
        Command::ExportTrace { data, plan, out } => {
            let file = DatasetFile::read(&data)?;
            let plan = read_plan(&plan)?;
            let model = file.live_backend()?;
            export_trace(model.as_ref(), &file.examples, &plan, &out)?;
        }
        Command::Render {
            scores,
            format,
            out,
        } => {
            let scores: ScoresFile = read_json(&scores)?;
            if scores.scores.len() != scores.sources.len() {
                return Err(Error::LengthMismatch {
                    expected: scores.sources.len(),
                    got: scores.scores.len(),
                }
                .into());
            }
            if scores.scores.iter().any(|s| !s.is_finite()) {
                return Err(Error::InvalidInput("scores must be finite".into()).into());
            }
            let format = match format {
                RenderFormat::Ansi => Format::Ansi,
                RenderFormat::Html => Format::Html,
            };
            write(&out, &render(&scores, format))?;
        }
        Command::Coeffs { theta, out } => {
            let doc: ThetaDocument = read_json(&theta)?;
            write(&out, &coefficients_csv(&doc.coefficients()?))?;
        }
        Command::Segment { text, out } => {
            let context = std::fs::read_to_string(&text).map_err(|e| Error::io(&text, e))?;
            let source_offsets = segment::segment_sentences(&context);
            write(
                &out,
                &canonical_json(&ExampleText {
                    context,
                    source_offsets,
                }),
            )?;
        }
    }
    Ok(())
}
