//! `lexnet` command-line tool.

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lexnet::bench::{bench_inference, report_params};
use lexnet::explain::{
    explain_prediction, faithfulness_eval, grad_cam, render_attribution, render_explanation, sample_rng, shapley_mc, write_figure,
    FaithfulnessConfig, Method,
};
use lexnet::flowdata::{
    encode_flow, parse_flows, read_data_dir, stratified_split, synth_generate, write_flows, write_signatures, Dataset, FlowFormat, FlowRecord,
    LabelMap, SynthConfig, SIGNATURES_FILE, TEST_FILE, TRAIN_FILE,
};
use lexnet::io::{load_model, load_model_with_config, model_checksum, save_model};
use lexnet::model::{LexNetModel, ModelConfig};
use lexnet::trainer::{evaluate, train, Metrics, TrainConfig, TrainReport};
use lexnet::{Error, Execution};
use rand::SeedableRng;

#[derive(Parser)]
#[command(name = "lexnet", version, about = "Prototype-based explainable classifier for encrypted traffic flows")]
#[command(after_help = "Set LEXNET_THREADS to bound the worker threads. Timing in `bench` is always single-threaded.")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-signature corpus.
    Synth(SynthArgs),
    /// Train a model on a data directory.
    Train(TrainArgs),
    /// Accuracy and per-class metrics on the test side of a data directory.
    Eval(EvalArgs),
    /// Predict a label and confidence for every flow in a file.
    Classify(ClassifyArgs),
    /// Render an explanation figure and sidecar for one flow.
    Explain(ExplainArgs),
    /// Score an attribution method against the by-design regions.
    Faithfulness(FaithArgs),
    /// Single-thread inference latency and throughput.
    Bench(BenchArgs),
    /// Per-layer cumulative parameter table.
    Params(ParamsArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Flows per class (the mean when --imbalance is above 1).
    #[arg(long, default_value_t = 200)]
    flows: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Ratio of the largest to the smallest class.
    #[arg(long, default_value_t = 1.0)]
    imbalance: f64,
    #[arg(long, default_value_t = 0.5)]
    test_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML file with optional `[train]` and `[model]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration report; JSON lines when the name ends in `.jsonl`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Print the metrics as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV or JSONL flow file; the label column may be empty.
    #[arg(long)]
    flows: PathBuf,
    /// Output JSONL; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    /// Flow id to explain.
    #[arg(long)]
    flow: String,
    /// Data directory holding the flow.
    #[arg(long, conflicts_with = "flows", required_unless_present = "flows")]
    data: Option<PathBuf>,
    /// Flow file holding the flow.
    #[arg(long)]
    flows: Option<PathBuf>,
    #[arg(long, default_value = "bydesign", value_parser = parse_method)]
    method: Method,
    /// Shapley permutations.
    #[arg(long, default_value_t = 200)]
    permutations: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FaithArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long, default_value_t = 20)]
    permutations: usize,
    /// Only the first this many test flows.
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ParamsArgs {
    /// Model file; without it the default architecture is counted.
    #[arg(long, conflicts_with_all = ["classes", "prototypes"])]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    classes: usize,
    /// Total prototypes; at least one per class.
    #[arg(long, default_value_t = 340)]
    prototypes: usize,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| format!("unknown method `{s}` (expected bydesign, gradcam, shapley or random)"))
}

/// Failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

const EXIT_OTHER: u8 = 1;
const EXIT_IO: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_MODEL_FILE: u8 = 5;
const EXIT_CONFIG: u8 = 6;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::Parse { .. } | Error::EmptyClass(_) | Error::Empty(_) => EXIT_DATA,
        Error::BadModelFile(_) | Error::UnsupportedVersion { .. } | Error::Checksum | Error::Truncated => EXIT_MODEL_FILE,
        Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
        _ => EXIT_OTHER,
    }
}

/// Attaches what was being done to a library error.
trait Context<T> {
    fn ctx(self, what: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T> Context<T> for lexnet::Result<T> {
    fn ctx(self, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: exit_code(&e), msg: format!("{}: {e}", what()) })
    }
}

impl<T> Context<T> for io::Result<T> {
    fn ctx(self, what: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: EXIT_IO, msg: format!("{}: {e}", what()) })
    }
}

fn fail<T>(code: u8, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure { code, msg: msg.into() })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    lexnet::exec::init_threads_from_env();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => synth(a, seed.unwrap_or(0)),
        Command::Train(a) => train_cmd(a, seed),
        Command::Eval(a) => eval(a, seed.unwrap_or(0)),
        Command::Classify(a) => classify(a),
        Command::Explain(a) => explain(a, seed.unwrap_or(0)),
        Command::Faithfulness(a) => faithfulness(a, seed.unwrap_or(0)),
        Command::Bench(a) => bench(a, seed.unwrap_or(0)),
        Command::Params(a) => params(a, seed.unwrap_or(0)),
    }
}

fn synth(a: SynthArgs, seed: u64) -> Result<(), Failure> {
    if a.imbalance < 1.0 {
        return fail(EXIT_CONFIG, format!("--imbalance {} must be at least 1", a.imbalance));
    }
    let cfg = if a.imbalance > 1.0 {
        SynthConfig::imbalanced(a.classes, a.flows, a.imbalance, a.noise, seed)
    } else {
        SynthConfig::balanced(a.classes, a.flows, a.noise, seed)
    };
    let (records, signatures) = synth_generate(&cfg).ctx(|| "generating corpus".into())?;
    let (train, test) = stratified_split(&records, a.test_fraction, seed).ctx(|| "splitting corpus".into())?;
    fs::create_dir_all(&a.out).ctx(|| format!("creating {}", a.out.display()))?;
    let p = |f: &str| a.out.join(f);
    write_flows(&p(TRAIN_FILE), &train, FlowFormat::Csv).ctx(|| format!("writing {}", p(TRAIN_FILE).display()))?;
    write_flows(&p(TEST_FILE), &test, FlowFormat::Csv).ctx(|| format!("writing {}", p(TEST_FILE).display()))?;
    write_signatures(&p(SIGNATURES_FILE), &signatures).ctx(|| format!("writing {}", p(SIGNATURES_FILE).display()))?;
    println!("{} train and {} test flows over {} classes in {}", train.len(), test.len(), signatures.len(), a.out.display());
    for s in &signatures {
        let cells: Vec<String> = s.markers.iter().map(|m| format!("{:?}@{}={}", m.kind, m.pos, m.value).to_lowercase()).collect();
        println!("{}  {}", s.class, cells.join(" "));
    }
    Ok(())
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    model: ModelConfig,
    train: TrainConfig,
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile, Failure> {
    let Some(path) = path else { return Ok(ConfigFile::default()) };
    let text = fs::read_to_string(path).ctx(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).or_else(|e| fail(EXIT_CONFIG, format!("config {}: {}", path.display(), e.message())))
}

fn train_cmd(a: TrainArgs, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = read_config(a.config.as_deref())?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let (train_recs, test_recs) = read_data_dir(&a.data, cfg.train.seed).ctx(|| format!("reading data {}", a.data.display()))?;
    let split = lexnet::flowdata::DatasetSplit::encode(&train_recs, &test_recs).ctx(|| format!("encoding data {}", a.data.display()))?;
    let test = (!split.test.is_empty()).then_some(&split.test);
    let (model, report) =
        train(cfg.model, split.labels.names.clone(), &split.train, test, &cfg.train, Execution::Parallel).ctx(|| "training".into())?;
    save_model(&a.out, &model, Some(&cfg.train)).ctx(|| format!("writing model {}", a.out.display()))?;
    if let Some(path) = &a.report {
        write_report(path, &report, &model.labels).ctx(|| format!("writing report {}", path.display()))?;
    }
    let m = &report.final_metrics;
    println!(
        "accuracy {:.4} on {} {} flows, {} prototypes (mean {:.2} per class)",
        m.accuracy,
        m.samples,
        if test.is_some() { "test" } else { "train" },
        model.prototypes.len(),
        m.prototypes_mean
    );
    println!("checksum {}", model_checksum(&model).ctx(|| "hashing model".into())?);
    Ok(())
}

fn write_report(path: &Path, report: &TrainReport, labels: &[String]) -> lexnet::Result<()> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        return report.save(path);
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{:>4} {:>11} {:>11} {:>9} {:>9} {:>7} {:>9}  grown", "iter", "stage1", "stage3", "train", "test", "protos", "kurtosis")?;
    for it in &report.iterations {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        writeln!(
            w,
            "{:>4} {:>11.6} {:>11.6} {:>9.4} {:>9} {:>7} {:>9}  {:?}",
            it.iteration,
            it.stage1_losses.last().copied().unwrap_or(f64::NAN),
            it.stage3_losses.last().copied().unwrap_or(f64::NAN),
            it.train_accuracy,
            opt(it.test_accuracy),
            it.prototypes_per_class.iter().sum::<usize>(),
            opt(it.kurtosis),
            it.grown_classes
        )?;
    }
    writeln!(w)?;
    write_metrics(&mut w, &report.final_metrics, Some(labels))?;
    w.flush()?;
    Ok(())
}

fn write_metrics<W: Write>(w: &mut W, m: &Metrics, labels: Option<&[String]>) -> io::Result<()> {
    writeln!(w, "samples     {}", m.samples)?;
    writeln!(w, "accuracy    {:.4}", m.accuracy)?;
    writeln!(w, "prototypes  mean {:.2}, min {}, max {}", m.prototypes_mean, m.prototypes_min, m.prototypes_max)?;
    writeln!(w, "{:<16} {:>7} {:>9}", "class", "flows", "accuracy")?;
    for (k, acc) in m.per_class_accuracy.iter().enumerate() {
        let name = labels.map_or_else(|| k.to_string(), |l| l[k].clone());
        let n: usize = m.confusion[k].iter().sum();
        writeln!(w, "{:<16} {:>7} {:>9}", name, n, acc.map_or("-".to_string(), |a| format!("{a:.4}")))?;
    }
    Ok(())
}

fn open_model(path: &Path) -> Result<LexNetModel, Failure> {
    load_model(path).ctx(|| format!("reading model {}", path.display()))
}

/// Encodes records with the model's label map; unknown labels are an error.
fn encode_for(model: &LexNetModel, records: &[FlowRecord], origin: &Path) -> Result<Dataset, Failure> {
    let labels = LabelMap { names: model.labels.clone() };
    Dataset::encode(records, &labels).map_err(|e| Failure { code: EXIT_DATA, msg: format!("{}: {e}", origin.display()) })
}

/// The test side of a data directory, or the training side when there is none.
fn eval_set(model: &LexNetModel, dir: &Path, seed: u64) -> Result<Dataset, Failure> {
    let (train, test) = read_data_dir(dir, seed).ctx(|| format!("reading data {}", dir.display()))?;
    let recs = if test.is_empty() { train } else { test };
    if recs.is_empty() {
        return fail(EXIT_DATA, format!("{} holds no flows", dir.display()));
    }
    encode_for(model, &recs, dir)
}

fn eval(a: EvalArgs, seed: u64) -> Result<(), Failure> {
    let model = open_model(&a.model)?;
    let data = eval_set(&model, &a.data, seed)?;
    let m = evaluate(&model, &data, Execution::Parallel).ctx(|| "evaluating".into())?;
    let out = io::stdout();
    let mut w = out.lock();
    if a.json {
        serde_json::to_writer_pretty(&mut w, &m).map_err(|e| Failure { code: EXIT_IO, msg: e.to_string() })?;
        writeln!(w).ctx(|| "writing output".into())
    } else {
        write_metrics(&mut w, &m, Some(&model.labels)).ctx(|| "writing output".into())
    }
}

#[derive(Serialize)]
struct Classified<'a> {
    flow_id: &'a str,
    label: &'a str,
    confidence: f64,
}

fn softmax_max(logits: &[f32], k: usize) -> f64 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let sum: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    (logits[k] as f64 - max).exp() / sum
}

fn classify(a: ClassifyArgs) -> Result<(), Failure> {
    let model = open_model(&a.model)?;
    let records = parse_flows(&a.flows, FlowFormat::from_path(&a.flows)).ctx(|| format!("reading flows {}", a.flows.display()))?;
    let mut inputs = Vec::with_capacity(records.len() * Dataset::SAMPLE_LEN);
    for r in &records {
        inputs.extend(encode_flow(r, 0).grid.into_data());
    }
    let preds = if records.is_empty() { Vec::new() } else { model.predict_batch(&inputs, Execution::Parallel).ctx(|| "classifying".into())? };
    let mut w: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).ctx(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for (r, p) in records.iter().zip(&preds) {
        let line = Classified { flow_id: &r.flow_id, label: &model.labels[p.class], confidence: softmax_max(&p.logits, p.class) };
        serde_json::to_writer(&mut w, &line).map_err(|e| Failure { code: EXIT_IO, msg: e.to_string() })?;
        writeln!(w).ctx(|| "writing output".into())?;
    }
    w.flush().ctx(|| "writing output".into())
}

fn find_flow(a: &ExplainArgs, seed: u64) -> Result<FlowRecord, Failure> {
    let (records, origin) = match (&a.data, &a.flows) {
        (Some(dir), _) => {
            let (mut train, test) = read_data_dir(dir, seed).ctx(|| format!("reading data {}", dir.display()))?;
            train.extend(test);
            (train, dir)
        }
        (None, Some(f)) => (parse_flows(f, FlowFormat::from_path(f)).ctx(|| format!("reading flows {}", f.display()))?, f),
        (None, None) => return fail(EXIT_CONFIG, "one of --data or --flows is required"),
    };
    records
        .into_iter()
        .find(|r| r.flow_id == a.flow)
        .map_or_else(|| fail(EXIT_DATA, format!("flow `{}` not found in {}", a.flow, origin.display())), Ok)
}

fn explain(a: ExplainArgs, seed: u64) -> Result<(), Failure> {
    let model = open_model(&a.model)?;
    let rec = find_flow(&a, seed)?;
    let x = encode_flow(&rec, 0).grid.into_data();
    let expl = explain_prediction(&model, &x, &rec.flow_id).ctx(|| format!("explaining {}", rec.flow_id))?;
    let k = expl.entries.len().max(1);
    let fig = match a.method {
        Method::ByDesign => render_explanation(&expl),
        Method::GradCam => {
            let map = grad_cam(&model, &x, expl.predicted).ctx(|| "grad-cam".into())?;
            render_attribution(&map, &x, &rec.flow_id, k).ctx(|| "rendering".into())?
        }
        Method::ShapleyMc => {
            let mut rng = sample_rng(seed, 0);
            let (map, _) = shapley_mc(&model, &x, expl.predicted, a.permutations, &mut rng).ctx(|| "shapley".into())?;
            render_attribution(&map, &x, &rec.flow_id, k).ctx(|| "rendering".into())?
        }
        Method::Random => {
            let map = lexnet::explain::random_map(expl.predicted, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).ctx(|| "random map".into())?;
            render_attribution(&map, &x, &rec.flow_id, k).ctx(|| "rendering".into())?
        }
    };
    if let Some(w) = &fig.warning {
        log::warn!("{w}");
        eprintln!("warning: {w}");
    }
    let (svg, side) = write_figure(&a.out, &fig).ctx(|| format!("writing figure to {}", a.out.display()))?;
    println!("{} predicted {}", rec.flow_id, expl.label);
    for e in &expl.entries {
        println!("  prototype {} score {:.4} at packet {}, variable {}; {}", e.proto_id, e.score, e.location.0, e.location.1, e.provenance);
    }
    println!("{}\n{}", svg.display(), side.display());
    Ok(())
}

fn faithfulness(a: FaithArgs, seed: u64) -> Result<(), Failure> {
    let model = open_model(&a.model)?;
    let data = eval_set(&model, &a.data, seed)?;
    let cfg = FaithfulnessConfig { method: a.method, seed, n_permutations: a.permutations, max_samples: a.max_samples };
    let r = faithfulness_eval(&model, &data, &cfg, Execution::Parallel).ctx(|| "faithfulness".into())?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r).map_err(|e| Failure { code: EXIT_IO, msg: e.to_string() })?);
    } else {
        println!("method              {}", r.method.name());
        println!("samples             {}", r.samples);
        println!("top-protos accuracy {:.4}", r.top_protos_accuracy);
        println!("top-10 accuracy     {:.4}", r.top_10_accuracy);
        println!("top-protos hit rate {:.4}", r.top_protos_hit_rate);
        println!("top-10 hit rate     {:.4}", r.top_10_hit_rate);
    }
    Ok(())
}

fn bench(a: BenchArgs, seed: u64) -> Result<(), Failure> {
    let model = open_model(&a.model)?;
    let data = eval_set(&model, &a.data, seed)?;
    let r = bench_inference(&model, &data, a.warmup, a.iters, a.batch).ctx(|| "benchmark".into())?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r).map_err(|e| Failure { code: EXIT_IO, msg: e.to_string() })?);
    } else {
        println!("{r}");
    }
    Ok(())
}

fn params(a: ParamsArgs, seed: u64) -> Result<(), Failure> {
    let model = match &a.model {
        Some(p) => load_model_with_config(p).ctx(|| format!("reading model {}", p.display()))?.0,
        None => {
            if a.classes == 0 || a.prototypes < a.classes {
                return fail(EXIT_CONFIG, format!("--prototypes {} must be at least --classes {} (and classes at least 1)", a.prototypes, a.classes));
            }
            let cfg = ModelConfig::default();
            let cap = cfg.proto_cap_per_class;
            if a.prototypes > a.classes * cap {
                return fail(EXIT_CONFIG, format!("--prototypes {} exceeds {cap} per class", a.prototypes));
            }
            let labels = (0..a.classes).map(|k| format!("c{k}")).collect();
            let mut m = LexNetModel::new(cfg, labels, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).ctx(|| "building model".into())?;
            let depth = m.latent_dims().0;
            for i in 0..a.prototypes - a.classes {
                m.add_prototype(i % a.classes, vec![0.0; depth], None).ctx(|| "adding prototypes".into())?;
            }
            m
        }
    };
    print!("{}", report_params(&model));
    println!("total {}", model.param_count());
    Ok(())
}
