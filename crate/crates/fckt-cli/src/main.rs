//! `fckt` — train, evaluate, and run targeted sentiment models.
//!
//! Subcommands: `prepare`, `train`, `eval`, `predict`, `sweep`. Config keys
//! are overridable as dotted flags (`--transfer.xi 0.8`); the `FCKT_SEED`
//! environment variable overrides the configured seed. Exit codes: 0
//! success, 1 validation failure, 2 runtime failure.

use clap::{Arg, ArgAction, Command};
use fckt_core::config::{RunConfig, OVERRIDE_KEYS};
use fckt_core::corpus::{self, DatasetFormat};
use fckt_core::error::Error as CoreError;
use fckt_core::metrics::{evaluate_model, text_table, EvalReport};
use fckt_core::trainer::{split_train_val, Checkpoint, Trainer};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

mod sweep;

/// Failure classified for the exit code.
#[derive(Debug)]
enum Failure {
    Validation(String),
    Runtime(String),
}

type CliResult<T> = Result<T, Failure>;

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Core errors raised before any work starts are validation failures;
/// everything after is runtime.
fn classify(e: CoreError) -> Failure {
    match e {
        CoreError::Config(_)
        | CoreError::Dataset(_)
        | CoreError::Record { .. }
        | CoreError::Records { .. }
        | CoreError::SpanOutOfRange { .. } => Failure::Validation(e.to_string()),
        _ => Failure::Runtime(e.to_string()),
    }
}

fn main() -> ExitCode {
    let cmd = build_command();
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match matches.subcommand() {
        Some(("prepare", m)) => cmd_prepare(m),
        Some(("train", m)) => cmd_train(m).map(|_| ()),
        Some(("eval", m)) => cmd_eval(m),
        Some(("predict", m)) => cmd_predict(m),
        Some(("sweep", m)) => sweep::cmd_sweep(m),
        _ => unreachable!("subcommand required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn build_command() -> Command {
    Command::new("fckt")
        .about("Joint aspect extraction and targeted sentiment classification")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("prepare")
                .about("Validate a dataset, convert it to native JSONL, and write the split manifest")
                .arg(Arg::new("input").long("input").required(true))
                .arg(
                    Arg::new("format")
                        .long("format")
                        .value_parser(["jsonl", "semeval-xml"])
                        .default_value("jsonl"),
                )
                .arg(Arg::new("output").long("output").required(true))
                .arg(
                    Arg::new("skip-invalid")
                        .long("skip-invalid")
                        .action(ArgAction::SetTrue)
                        .help("Report malformed records and continue instead of failing"),
                ),
        )
        .subcommand(with_override_flags(
            Command::new("train")
                .about("Train a model from a config file")
                .arg(Arg::new("config").long("config").required(true)),
        ))
        .subcommand(with_override_flags(
            Command::new("eval")
                .about("Evaluate a checkpoint on a dataset")
                .arg(Arg::new("checkpoint").long("checkpoint").required(true))
                .arg(Arg::new("data").long("data").required(true))
                .arg(
                    Arg::new("format")
                        .long("format")
                        .value_parser(["jsonl", "semeval-xml"])
                        .default_value("jsonl"),
                )
                .arg(Arg::new("output").long("output").help("Report directory")),
        ))
        .subcommand(
            Command::new("predict")
                .about("Decode aspects and sentiments for raw sentences")
                .arg(Arg::new("checkpoint").long("checkpoint").required(true))
                .arg(Arg::new("input").long("input").required(true))
                .arg(
                    Arg::new("format")
                        .long("format")
                        .value_parser(["jsonl", "semeval-xml"])
                        .default_value("jsonl"),
                )
                .arg(Arg::new("output").long("output").required(true)),
        )
        .subcommand(with_override_flags(
            Command::new("sweep")
                .about("Run a hyperparameter grid, one training run per cell")
                .arg(Arg::new("config").long("config").required(true))
                .arg(
                    Arg::new("grid")
                        .long("grid")
                        .action(ArgAction::Append)
                        .help("key=v1,v2,... over transfer.xi, transfer.h, trainer.lambda, contrast.tau"),
                )
                .arg(Arg::new("output").long("output").help("Sweep directory")),
        ))
}

/// Registers every config key as a dotted long flag.
fn with_override_flags(cmd: Command) -> Command {
    OVERRIDE_KEYS.iter().fold(cmd, |c, key| {
        c.arg(
            Arg::new(*key)
                .long(*key)
                .value_name("VALUE")
                .help("Config override")
                .hide(true),
        )
    })
}

/// Loads the config file, applies dotted-flag overrides and `FCKT_SEED`.
fn load_config(m: &clap::ArgMatches) -> CliResult<RunConfig> {
    let path = PathBuf::from(m.get_one::<String>("config").expect("required"));
    let mut cfg = RunConfig::load(&path).map_err(classify)?;
    apply_overrides(&mut cfg, m)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, m: &clap::ArgMatches) -> CliResult<()> {
    for key in OVERRIDE_KEYS {
        if let Some(value) = m.get_one::<String>(key) {
            cfg.apply_override(key, value).map_err(classify)?;
        }
    }
    if let Ok(seed) = std::env::var("FCKT_SEED") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| Failure::Validation(format!("FCKT_SEED={seed} is not an integer")))?;
        cfg.trainer.seed = seed;
    }
    cfg.validate().map_err(classify)?;
    Ok(())
}

fn parse_format(m: &clap::ArgMatches) -> DatasetFormat {
    DatasetFormat::parse(m.get_one::<String>("format").expect("defaulted"))
        .expect("value_parser restricts values")
}

#[derive(Serialize)]
struct SplitManifestEntry {
    source_id: String,
    aspect_index: usize,
    start: usize,
    end: usize,
    polarity: fckt_core::corpus::Polarity,
}

#[derive(Serialize)]
struct SplitManifest {
    sentences: usize,
    aspects: usize,
    zero_aspect_sentences: usize,
    examples: Vec<SplitManifestEntry>,
    rejected: Vec<fckt_core::corpus::RecordError>,
}

fn cmd_prepare(m: &clap::ArgMatches) -> CliResult<()> {
    let input = PathBuf::from(m.get_one::<String>("input").expect("required"));
    let output = PathBuf::from(m.get_one::<String>("output").expect("required"));
    let format = parse_format(m);
    let strict = !m.get_flag("skip-invalid");

    let outcome = corpus::load_records(&input, format, strict).map_err(classify)?;
    let split = corpus::split_sentences(&outcome.sentences);
    corpus::write_jsonl(&output, &outcome.sentences).map_err(runtime)?;

    let manifest = SplitManifest {
        sentences: outcome.sentences.len(),
        aspects: outcome.aspect_count(),
        zero_aspect_sentences: split.zero_aspect_sentences,
        examples: split
            .examples
            .iter()
            .map(|e| SplitManifestEntry {
                source_id: e.origin.source_id.clone(),
                aspect_index: e.origin.aspect_index,
                start: e.start,
                end: e.end,
                polarity: e.polarity,
            })
            .collect(),
        rejected: outcome.rejected.clone(),
    };
    let manifest_path = output.with_extension("split.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).map_err(runtime)?,
    )
    .map_err(runtime)?;

    println!(
        "{} sentences, {} aspects, {} without aspects; {} split examples",
        manifest.sentences,
        manifest.aspects,
        manifest.zero_aspect_sentences,
        manifest.examples.len()
    );
    if !outcome.rejected.is_empty() {
        println!("{} record(s) rejected (see manifest)", outcome.rejected.len());
    }
    println!("wrote {} and {}", output.display(), manifest_path.display());
    Ok(())
}

fn load_sentences(path: &Path, format: DatasetFormat) -> CliResult<Vec<corpus::AnnotatedSentence>> {
    corpus::load_dataset(path, format).map_err(classify)
}

fn cmd_train(m: &clap::ArgMatches) -> CliResult<PathBuf> {
    let cfg = load_config(m)?;
    let train_path = cfg
        .data
        .train_path
        .clone()
        .ok_or_else(|| Failure::Validation("config sets no data.train_path".into()))?;
    let format = cfg.data.format();
    let sentences = load_sentences(&train_path, format)?;
    let (train, val) = match &cfg.data.val_path {
        Some(val_path) => (sentences, load_sentences(val_path, format)?),
        None => {
            let (val, train) =
                split_train_val(&sentences, cfg.trainer.val_fraction, cfg.trainer.seed);
            (train, val)
        }
    };
    if train.is_empty() {
        return Err(Failure::Validation("no training sentences".into()));
    }

    let run_dir = cfg.run_dir();
    let mut trainer = Trainer::new(cfg, &train).map_err(classify)?;
    let outcome = trainer.train(&train, &val, &run_dir).map_err(runtime)?;
    match outcome.best_epoch {
        Some(epoch) => println!(
            "run {} finished: best epoch {epoch}, validation F1 {:.4}",
            run_dir.display(),
            outcome.best_f1
        ),
        None => println!("run {} finished with no training epochs", run_dir.display()),
    }
    println!("best checkpoint: {}", outcome.best_checkpoint.display());
    Ok(run_dir)
}

fn write_report(report: &EvalReport, name: &str, dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(runtime)?;
    let json_path = dir.join("report.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(report).map_err(runtime)?,
    )
    .map_err(runtime)?;
    let table = text_table(&[(name.to_string(), report)]);
    std::fs::write(dir.join("report.txt"), &table).map_err(runtime)?;
    print!("{table}");
    println!("wrote {}", json_path.display());
    Ok(())
}

fn cmd_eval(m: &clap::ArgMatches) -> CliResult<()> {
    let ckpt_path = PathBuf::from(m.get_one::<String>("checkpoint").expect("required"));
    let data_path = PathBuf::from(m.get_one::<String>("data").expect("required"));
    let format = parse_format(m);
    let ckpt = Checkpoint::load(&ckpt_path).map_err(runtime)?;
    let mut cfg = ckpt.config.clone();
    apply_overrides(&mut cfg, m)?;
    let sentences = load_sentences(&data_path, format)?;
    let report = evaluate_model(&ckpt.model, &sentences, &cfg).map_err(runtime)?;
    if report.counts.num_pred == 0 {
        eprintln!("warning: the model predicted no aspects at all");
    }
    let out_dir = m
        .get_one::<String>("output")
        .map(PathBuf::from)
        .unwrap_or_else(|| ckpt_path.parent().unwrap_or(Path::new(".")).join("eval"));
    let name = data_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    write_report(&report, &name, &out_dir)
}

#[derive(Serialize)]
struct PredictedAspect {
    start: usize,
    end: usize,
    polarity: fckt_core::corpus::Polarity,
    score: f64,
}

#[derive(Serialize)]
struct PredictionRecord {
    id: String,
    tokens: Vec<String>,
    aspects: Vec<PredictedAspect>,
}

fn cmd_predict(m: &clap::ArgMatches) -> CliResult<()> {
    let ckpt_path = PathBuf::from(m.get_one::<String>("checkpoint").expect("required"));
    let input = PathBuf::from(m.get_one::<String>("input").expect("required"));
    let output = PathBuf::from(m.get_one::<String>("output").expect("required"));
    let format = parse_format(m);
    let ckpt = Checkpoint::load(&ckpt_path).map_err(runtime)?;
    let sentences = load_sentences(&input, format)?;
    let predictions = ckpt
        .model
        .predict_corpus(&sentences, &ckpt.config)
        .map_err(runtime)?;

    let mut out = String::new();
    for (sentence, preds) in sentences.iter().zip(&predictions) {
        let record = PredictionRecord {
            id: sentence.source_id.clone(),
            tokens: sentence.tokens.clone(),
            aspects: preds
                .iter()
                .map(|p| PredictedAspect {
                    start: p.start,
                    end: p.end,
                    polarity: p.polarity,
                    score: p.span_score,
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&record).map_err(runtime)?);
        out.push('\n');
    }
    std::fs::write(&output, out).map_err(runtime)?;
    let total: usize = predictions.iter().map(Vec::len).sum();
    println!(
        "predicted {total} aspects over {} sentences -> {}",
        sentences.len(),
        output.display()
    );
    Ok(())
}
