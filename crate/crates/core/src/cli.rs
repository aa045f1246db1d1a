//! Command-line front end. Each command reads an optional JSON config
//! (unknown keys rejected), applies flag overrides, validates, and only then
//! writes outputs. The resolved config lands next to the outputs; the wall
//! clock goes to a separate `meta.json` so primary outputs stay reproducible.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    build_analogy_pairs, category_matrix, mine_disagreements, noise_recovery_report, render_heatmap, sample_records,
    summarize_credits, write_disagreements_csv, write_ppm, write_samples_jsonl, CategoryMatrix, Metric,
};
use crate::data::{
    dataset_stats, generate_synthetic, parse_conll04, parse_tacred_json, read_flip_log, read_jsonl, write_flip_log,
    write_jsonl, Corpus, SentenceConfigKind, Split, SynthSpec,
};
use crate::error::Error;
use crate::model::{
    evaluate, load_checkpoint, save_checkpoint, train, write_predictions_csv, write_predictions_jsonl, HeadSet, Model,
    ModelConfig, PredictionRecord, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "caprel", version, about = "Relation extraction with dynamic routing heads")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic corpus.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Entity-similarity probes before and after training.
    Analyze(AnalyzeArgs),
    /// Bucket prediction disagreements and sample them for inspection.
    Mine(MineArgs),
    /// Render a category-matrix CSV as a PPM heatmap.
    Render(RenderArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// One instance per line, in the native field layout.
    Jsonl,
    /// TACRED-style JSON array.
    Tacred,
    /// CoNLL04, column or JSON layout.
    Conll04,
}

impl DataFormat {
    fn guess(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => DataFormat::Jsonl,
            Some("json") => DataFormat::Tacred,
            _ => DataFormat::Conll04,
        }
    }
}

pub fn load_corpus(path: &Path, format: Option<DataFormat>, split: Split) -> crate::Result<Corpus> {
    match format.unwrap_or_else(|| DataFormat::guess(path)) {
        DataFormat::Jsonl => Corpus::new(read_jsonl(path)?, split),
        DataFormat::Tacred => parse_tacred_json(path, split),
        DataFormat::Conll04 => parse_conll04(path, split),
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))
        }
    }
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    value.as_deref().ok_or_else(|| CliError::config(format!("missing `{key}` (config key or flag)")))
}

fn existing<'a>(value: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    let p = required(value, key)?;
    if !p.exists() {
        return Err(Error::NotFound(format!("{key} {} does not exist", p.display())).into());
    }
    Ok(p)
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::from(Error::Io(e)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> crate::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Resolved config plus a metadata sidecar holding the wall clock.
fn record_run<T: Serialize>(out: &Path, command: &str, config: &T) -> crate::Result<()> {
    write_json(&out.join(format!("{command}.config.json")), config)?;
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    write_json(
        &out.join("meta.json"),
        &serde_json::json!({
            "command": command,
            "finished_unix_seconds": secs,
            "version": env!("CARGO_PKG_VERSION"),
        }),
    )
}

// ---- synth ----

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthRun {
    pub out: Option<PathBuf>,
    pub spec: SynthSpec,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_eval: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub negative_ratio: Option<f64>,
    #[arg(long)]
    pub noise_rate: Option<f64>,
}

fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let mut run: SynthRun = read_config(args.config.as_deref())?;
    if args.out.is_some() {
        run.out = args.out.clone();
    }
    let spec = &mut run.spec;
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.n_train {
        spec.n_train = v;
    }
    if let Some(v) = args.n_eval {
        spec.n_eval = v;
    }
    if let Some(v) = args.n_test {
        spec.n_test = v;
    }
    if let Some(v) = args.negative_ratio {
        spec.negative_ratio = v;
    }
    if let Some(v) = args.noise_rate {
        spec.noise_rate = v;
    }
    spec.validate()?;
    let out = required(&run.out, "out")?;
    let corpus = generate_synthetic(&run.spec)?;
    prepare_out(out)?;
    for split in [Split::Train, Split::Eval, Split::Test] {
        write_jsonl(&out.join(format!("{}.jsonl", split.name())), &corpus.split(split).instances)?;
    }
    if run.spec.noise_rate > 0.0 {
        write_flip_log(&out.join("flips.csv"), &corpus.flips)?;
    }
    write_json(&out.join("stats.json"), &dataset_stats(&corpus.train)?)?;
    record_run(out, "synth", &run)?;
    eprintln!(
        "wrote {} train / {} eval / {} test instances to {}",
        corpus.train.len(),
        corpus.eval.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

// ---- train ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub format: Option<DataFormat>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Checkpoint to continue from; its model config wins over `model`.
    #[serde(default)]
    pub resume: Option<PathBuf>,
    /// Seed for parameter initialization.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
}

fn default_model() -> ModelConfig {
    ModelConfig::new("h3".parse().expect("valid head set"), SentenceConfigKind::Mix)
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            train: None,
            format: None,
            out: None,
            resume: None,
            seed: 0,
            model: default_model(),
            training: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Seeds both initialization and batch order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated heads, e.g. `h1,h3,decoder`.
    #[arg(long)]
    pub heads: Option<String>,
    #[arg(long)]
    pub sentence: Option<SentenceConfigKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let mut run: TrainRun = read_config(args.config.as_deref())?;
    if args.train.is_some() {
        run.train = args.train.clone();
    }
    if args.format.is_some() {
        run.format = args.format;
    }
    if args.out.is_some() {
        run.out = args.out.clone();
    }
    if args.resume.is_some() {
        run.resume = args.resume.clone();
    }
    if let Some(s) = args.seed {
        run.seed = s;
        run.training.seed = s;
    }
    if let Some(h) = &args.heads {
        run.model.heads = h.parse::<HeadSet>().map_err(CliError::from)?;
    }
    if let Some(s) = args.sentence {
        run.model.sentence = s;
    }
    if let Some(e) = args.epochs {
        run.training.epochs = e;
    }
    if args.batch_size.is_some() {
        run.training.batch_size = args.batch_size;
    }
    if args.learning_rate.is_some() {
        run.training.learning_rate = args.learning_rate;
    }
    run.training.validate()?;
    let train_path = existing(&run.train, "train")?;
    let out = required(&run.out, "out")?;
    let (mut model, state) = match &run.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            run.model = ck.model.config.clone();
            run.seed = ck.model.seed;
            (Some(ck.model), ck.state)
        }
        None => {
            run.model.validate()?;
            (None, None)
        }
    };
    let corpus = load_corpus(train_path, run.format, Split::Train)?;
    let mut model = match model.take() {
        Some(m) => m,
        None => Model::for_corpus(run.model.clone(), &corpus, run.seed)?,
    };
    prepare_out(out)?;
    let outcome = train(&mut model, &corpus, &run.training, state)?;
    save_checkpoint(&out.join("model.ckpt"), &model, Some(&outcome.state))?;
    let mut w = csv::Writer::from_path(out.join("trace.csv")).map_err(Error::from)?;
    w.write_record(["epoch", "step", "loss", "running_micro_f1", "train_micro_f1"]).map_err(Error::from)?;
    for r in &outcome.trace {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            r.loss.to_string(),
            r.running_micro_f1.to_string(),
            r.train_micro_f1.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(Error::from)?;
        eprintln!(
            "epoch {:>3}  step {:>6}  loss {:.5}  running micro-F1 {:.4}",
            r.epoch, r.step, r.loss, r.running_micro_f1
        );
    }
    w.flush().map_err(Error::Io)?;
    record_run(out, "train", &run)?;
    Ok(())
}

// ---- eval ----

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRun {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub format: Option<DataFormat>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let mut run: EvalRun = read_config(args.config.as_deref())?;
    override_paths(&mut run.checkpoint, &args.checkpoint);
    override_paths(&mut run.data, &args.data);
    override_paths(&mut run.out, &args.out);
    if args.format.is_some() {
        run.format = args.format;
    }
    let ck_path = existing(&run.checkpoint, "checkpoint")?;
    let data = existing(&run.data, "data")?;
    let out = required(&run.out, "out")?;
    let model = load_checkpoint(ck_path)?.model;
    let corpus = load_corpus(data, run.format, Split::Test)?;
    let (metrics, records) = evaluate(&model, &corpus)?;
    prepare_out(out)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    write_predictions_csv(&out.join("predictions.csv"), &records)?;
    write_predictions_jsonl(&out.join("predictions.jsonl"), &records)?;
    write_json(&out.join("credits.json"), &summarize_credits(&records))?;
    record_run(out, "eval", &run)?;
    eprintln!(
        "micro-F1 {:.4}  macro-F1 {:.4}  accuracy {:.4}  (n = {})",
        metrics.micro_f1, metrics.macro_f1, metrics.accuracy, metrics.n
    );
    Ok(())
}

fn override_paths(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag.clone();
    }
}

// ---- analyze ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeRun {
    /// Trained checkpoint; "before" matrices come from the same config and
    /// seed, freshly initialized.
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub format: Option<DataFormat>,
    pub out: Option<PathBuf>,
    pub max_pairs_per_polarity: usize,
    pub seed: u64,
    pub metrics: Vec<Metric>,
}

impl Default for AnalyzeRun {
    fn default() -> Self {
        Self {
            checkpoint: None,
            data: None,
            format: None,
            out: None,
            max_pairs_per_polarity: 500,
            seed: 0,
            metrics: vec![Metric::Cosine, Metric::Euclidean],
        }
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_pairs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct GapSummary {
    tag: String,
    metric: Metric,
    /// Heads+ minus Heads- per layer.
    head_gap: Vec<f64>,
    /// Tails+ minus Tails- per layer.
    tail_gap: Vec<f64>,
}

fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<()> {
    let mut run: AnalyzeRun = read_config(args.config.as_deref())?;
    override_paths(&mut run.checkpoint, &args.checkpoint);
    override_paths(&mut run.data, &args.data);
    override_paths(&mut run.out, &args.out);
    if args.format.is_some() {
        run.format = args.format;
    }
    if let Some(m) = args.max_pairs {
        run.max_pairs_per_polarity = m;
    }
    if let Some(s) = args.seed {
        run.seed = s;
    }
    if run.metrics.is_empty() {
        return Err(CliError::config("`metrics` must list at least one metric"));
    }
    let ck_path = existing(&run.checkpoint, "checkpoint")?;
    let data = existing(&run.data, "data")?;
    let out = required(&run.out, "out")?;
    let after = load_checkpoint(ck_path)?.model;
    let before = Model::new(after.config.clone(), after.vocab.clone(), after.relations.clone(), after.seed)?;
    let corpus = load_corpus(data, run.format, Split::Test)?;
    let pairs = build_analogy_pairs(&corpus, run.max_pairs_per_polarity, run.seed)?;
    let after_tag = format!("after-{}", after.config.heads);
    let mut summary = Vec::new();
    let mut matrices = Vec::new();
    for metric in &run.metrics {
        for (stem, tag, model) in [("before", "before".to_string(), &before), ("after", after_tag.clone(), &after)] {
            let m = category_matrix(model, &corpus, &pairs, *metric, &tag)?;
            matrices.push((format!("{stem}_{metric}"), m));
        }
    }
    prepare_out(out)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(out.join("pairs.jsonl")).map_err(Error::from)?);
    for p in &pairs {
        use std::io::Write;
        serde_json::to_writer(&mut w, p).map_err(Error::from)?;
        w.write_all(b"\n").map_err(Error::from)?;
    }
    drop(w);
    for (stem, m) in &matrices {
        render_heatmap(m, out, stem)?;
        summary.push(GapSummary {
            tag: m.tag.clone(),
            metric: m.metric,
            head_gap: (0..m.layers()).map(|l| m.head_gap(l)).collect(),
            tail_gap: m.values.iter().map(|r| r[2] - r[3]).collect(),
        });
    }
    write_json(&out.join("summary.json"), &summary)?;
    record_run(out, "analyze", &run)?;
    for s in &summary {
        eprintln!(
            "{:<24} {:<9} last-layer Heads+ - Heads- = {:+.4}",
            s.tag,
            s.metric.name(),
            s.head_gap.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

// ---- mine ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MineRun {
    /// `predictions.jsonl` written by `eval`.
    pub predictions: Option<PathBuf>,
    /// Corpus the predictions were made on, used to render samples.
    pub data: Option<PathBuf>,
    pub format: Option<DataFormat>,
    pub sentence: SentenceConfigKind,
    pub flips: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub samples_per_category: usize,
    pub seed: u64,
}

impl Default for MineRun {
    fn default() -> Self {
        Self {
            predictions: None,
            data: None,
            format: None,
            sentence: SentenceConfigKind::Mix,
            flips: None,
            out: None,
            samples_per_category: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
    #[arg(long)]
    pub flips: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn read_predictions(path: &Path) -> crate::Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                source_name: path.display().to_string(),
                record: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn cmd_mine(args: &MineArgs) -> CliResult<()> {
    let mut run: MineRun = read_config(args.config.as_deref())?;
    override_paths(&mut run.predictions, &args.predictions);
    override_paths(&mut run.data, &args.data);
    override_paths(&mut run.flips, &args.flips);
    override_paths(&mut run.out, &args.out);
    if args.format.is_some() {
        run.format = args.format;
    }
    if let Some(k) = args.k {
        run.samples_per_category = k;
    }
    if let Some(s) = args.seed {
        run.seed = s;
    }
    let preds = existing(&run.predictions, "predictions")?;
    let data = existing(&run.data, "data")?;
    let out = required(&run.out, "out")?;
    let records = read_predictions(preds)?;
    if records.is_empty() {
        return Err(Error::Empty(format!("{} has no predictions", preds.display())).into());
    }
    let corpus = load_corpus(data, run.format, Split::Test)?;
    let categories = mine_disagreements(&records);
    let samples = sample_records(&categories, &corpus, run.sentence, run.samples_per_category, run.seed)?;
    let recovery = match &run.flips {
        Some(p) => {
            let ids: std::collections::BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
            let flips: Vec<_> = read_flip_log(p)?.into_iter().filter(|f| ids.contains(f.id.as_str())).collect();
            Some(noise_recovery_report(&categories, &flips))
        }
        None => None,
    };
    prepare_out(out)?;
    write_disagreements_csv(&out.join("disagreements.csv"), &categories)?;
    write_samples_jsonl(&out.join("samples.jsonl"), &samples)?;
    if let Some(r) = &recovery {
        write_json(&out.join("noise_recovery.json"), r)?;
        eprintln!("recovered {} of {} flipped instances among {} disagreements", r.recovered, r.flips, r.disagreements);
    }
    record_run(out, "mine", &run)?;
    eprintln!("{} disagreement categories", categories.len());
    Ok(())
}

// ---- render ----

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Category-matrix CSV written by `analyze`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn cmd_render(args: &RenderArgs) -> CliResult<()> {
    let m = CategoryMatrix::read_csv(&args.input, Metric::Cosine, "input")?;
    write_ppm(&m, &args.out)?;
    Ok(())
}

/// Runs a parsed command.
pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Mine(a) => cmd_mine(a),
        Command::Render(a) => cmd_render(a),
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
