//! Command-line front end: `train`, `extract`, `eval`, `bench`, `inspect`.
//!
//! Only the primary JSON result goes to stdout. Failures print one
//! `ERROR:` line to stderr and exit with 1 for bad input or 2 otherwise.

use std::ffi::OsString;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::data::{load_corpus, load_texts, tokenize, Example, Glove, LoadMode, MatchMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::runtime::{
    atomic_write, benchmark, count_params, evaluate_model, gradient_attribution, init_model, load_checkpoint, save_checkpoint, to_jsonl,
    train, BenchOptions, EpochMetrics, TrainConfig,
};
use crate::tagger::{EntityType, TypeRelationMap};

#[derive(Debug, Parser)]
#[command(name = "fastre", version, about = "Relation extraction with a dilated convolutional encoder and cascade tagger")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint plus a per-epoch metrics log.
    Train(TrainArgs),
    /// Extract triples from a JSONL file of {"text": ...} objects.
    Extract(ExtractArgs),
    /// Score a model against a labelled corpus.
    Eval(EvalArgs),
    /// Measure inference latency per batch size.
    Bench(BenchArgs),
    /// Show parameter counts and optional per-token gradient norms.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training corpus (JSONL).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Type-relation map (JSON).
    #[arg(long)]
    pub map: PathBuf,
    /// Word vectors in GloVe text format.
    #[arg(long)]
    pub glove: PathBuf,
    /// Output directory for model.fre, metrics.jsonl and config.json.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Hold out this fraction for model selection.
    #[arg(long)]
    pub val_split: Option<f64>,
    /// Ablations to enable: no_dilation, no_gate, no_residual, no_mapping, global_threshold.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<String>,
    /// Number of encoder blocks.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Comma-separated dilation rate per block.
    #[arg(long, value_delimiter = ',')]
    pub dilations: Option<Vec<usize>>,
    /// Skip malformed corpus lines instead of failing.
    #[arg(long)]
    pub skip_bad_lines: bool,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Must match the map stored in the model.
    #[arg(long)]
    pub map: PathBuf,
    /// Require full head and tail spans to match.
    #[arg(long)]
    pub exact: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 8, 128])]
    pub batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    /// Also time a run with this many worker threads.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Sentence to compute per-token gradient norms for.
    #[arg(long)]
    pub attribution: Option<String>,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("ERROR: {first}");
            eprint!("{}", e.render());
            return 1;
        }
    };
    match execute(cli.command) {
        Ok(output) => {
            use std::io::Write;
            // a closed stdout (e.g. piped into `head`) is not a failure
            let _ = writeln!(std::io::stdout(), "{output}");
            0
        }
        Err(e) => {
            eprintln!("ERROR: {}", e.to_string().replace('\n', " "));
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn execute(command: Command) -> Result<String> {
    let value = match command {
        Command::Train(a) => cmd_train(a)?,
        Command::Extract(a) => cmd_extract(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Bench(a) => cmd_bench(a)?,
        Command::Inspect(a) => cmd_inspect(a)?,
    };
    Ok(serde_json::to_string_pretty(&value)?)
}

/// Starts from the config file (or defaults) and applies explicit flags.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.val_split {
        cfg.val_split = v;
    }
    for name in &a.ablate {
        cfg.model.ablation.enable(name)?;
    }
    match (a.layers, &a.dilations) {
        (Some(l), Some(d)) => {
            cfg.model.encoder.layers = l;
            cfg.model.encoder.dilation_rates = d.clone();
        }
        (Some(l), None) => {
            cfg.model.encoder.layers = l;
            cfg.model.encoder.dilation_rates = vec![1; l];
        }
        (None, Some(d)) => {
            cfg.model.encoder.layers = d.len();
            cfg.model.encoder.dilation_rates = d.clone();
        }
        (None, None) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<serde_json::Value> {
    let cfg = resolve_train_config(&a)?;
    let mode = if a.skip_bad_lines { LoadMode::Skip } else { LoadMode::FailFast };
    let corpus = load_corpus(&a.corpus, mode, cfg.model.encoder.max_len)?;
    let map = TypeRelationMap::load(&a.map)?;
    let glove = Glove::load(&a.glove)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let metrics_path = a.out.join("metrics.jsonl");
    let mut model = init_model(&corpus.examples, &map, &glove, &cfg)?;
    let mut log: Vec<EpochMetrics> = Vec::new();
    let mut write_error = None;
    let report = train(&mut model, &corpus.examples, &cfg, |m, _| {
        log.push(*m);
        match to_jsonl(&log).and_then(|text| atomic_write(&metrics_path, text.as_bytes())) {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                write_error = Some(e);
                ControlFlow::Break(())
            }
        }
    })?;
    if let Some(e) = write_error {
        return Err(e);
    }
    let checkpoint = a.out.join("model.fre");
    save_checkpoint(&model, &checkpoint)?;
    atomic_write(&a.out.join("config.json"), serde_json::to_string_pretty(&cfg)?.as_bytes())?;
    let last = report.metrics.last().copied();
    Ok(json!({
        "checkpoint": checkpoint,
        "metrics": metrics_path,
        "epochs": report.metrics.len(),
        "steps": report.steps,
        "selected_epoch": report.selected_epoch,
        "final_loss": last.map(|m| m.loss),
        "final_f1": last.map(|m| m.f1),
        "corpus": corpus.stats,
    }))
}

#[derive(Serialize)]
struct TripleOut<'a> {
    head: [usize; 2],
    head_type: EntityType,
    head_text: String,
    relation: &'a str,
    tail: [usize; 2],
    tail_text: String,
    score: f64,
}

fn span_text(tokens: &[String], s: usize, e: usize) -> String {
    tokens[s..=e].join(" ")
}

/// Extraction output rows for `texts`, one JSON object per sentence.
pub fn extract_rows(model: &Model, texts: &[String], batch_size: usize) -> Result<Vec<serde_json::Value>> {
    let mut rows = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(batch_size.max(1)) {
        let tokens: Vec<Vec<String>> = chunk
            .iter()
            .map(|t| {
                let mut tk = tokenize(t);
                tk.truncate(model.config().encoder.max_len);
                tk
            })
            .collect();
        for ((text, tk), ex) in chunk.iter().zip(&tokens).zip(model.extract_tokens(&tokens)?) {
            let triples: Vec<TripleOut> = ex
                .triples
                .iter()
                .map(|t| TripleOut {
                    head: [t.head.start, t.head.end],
                    head_type: t.head_type(),
                    head_text: span_text(tk, t.head.start, t.head.end),
                    relation: model.map().relation_name(t.relation),
                    tail: [t.tail.start, t.tail.end],
                    tail_text: span_text(tk, t.tail.start, t.tail.end),
                    score: t.head.score.min(t.tail.score),
                })
                .collect();
            rows.push(json!({ "text": text, "triples": triples }));
        }
    }
    Ok(rows)
}

fn cmd_extract(a: ExtractArgs) -> Result<serde_json::Value> {
    let model = load_checkpoint(&a.model)?;
    let texts = load_texts(&a.input)?;
    let rows = extract_rows(&model, &texts, a.batch_size)?;
    let triples: usize = rows.iter().map(|r| r["triples"].as_array().map_or(0, Vec::len)).sum();
    atomic_write(&a.output, to_jsonl(&rows)?.as_bytes())?;
    Ok(json!({ "sentences": rows.len(), "triples": triples, "output": a.output }))
}

fn load_labelled(path: &Path, model: &Model) -> Result<Vec<Example>> {
    Ok(load_corpus(path, LoadMode::FailFast, model.config().encoder.max_len)?.examples)
}

fn cmd_eval(a: EvalArgs) -> Result<serde_json::Value> {
    let model = load_checkpoint(&a.model)?;
    let map = TypeRelationMap::load(&a.map)?;
    if &map != model.map() {
        return Err(Error::Schema("type-relation map differs from the one stored in the model".into()));
    }
    let examples = load_labelled(&a.corpus, &model)?;
    let mode = if a.exact { MatchMode::Exact } else { MatchMode::Partial };
    Ok(serde_json::to_value(evaluate_model(&model, &examples, mode, 32)?)?)
}

fn cmd_bench(a: BenchArgs) -> Result<serde_json::Value> {
    if a.batch_sizes.iter().any(|&b| b == 0) {
        return Err(Error::InvalidArgument("batch sizes must be positive".into()));
    }
    let model = load_checkpoint(&a.model)?;
    let examples = load_labelled(&a.corpus, &model)?;
    let opts = BenchOptions {
        batch_sizes: a.batch_sizes,
        repetitions: a.repetitions,
        threads: a.threads,
        ..BenchOptions::default()
    };
    Ok(serde_json::to_value(benchmark(&model, &examples, &opts)?)?)
}

fn cmd_inspect(a: InspectArgs) -> Result<serde_json::Value> {
    let model = load_checkpoint(&a.model)?;
    let counts = count_params(model.params());
    for (group, n) in &counts.groups {
        eprintln!("{group:<12} {n:>10}");
    }
    eprintln!("{:<12} {:>10}", "total", counts.total);
    let mut out = json!({ "params": counts, "config": model.config() });
    if let Some(sentence) = a.attribution {
        let ex = Example::from_text(&sentence, model.config().encoder.max_len);
        let norms = gradient_attribution(&model, &ex.tokens, None)?;
        out["attribution"] = ex
            .tokens
            .iter()
            .zip(norms)
            .map(|(t, n)| json!({ "token": t, "norm": n }))
            .collect();
    }
    Ok(out)
}
