use clap::{Args, Parser, Subcommand};
use routekt_core::checkpoint::Checkpoint;
use routekt_core::data::{self, make_splits, preprocess, DatasetSplit, PreprocessConfig, ProcessedDataset};
use routekt_core::manifest::RunManifest;
use routekt_core::relevance::{build_relevance_matrix, relevance_stats};
use routekt_core::synth::{generate, SynthSpec};
use routekt_core::train::{
    cross_validate, evaluate, train_fold, FoldIndices, PreparedData, RunDir, TrainConfig, EARLY_STOP_METRIC,
};
use routekt_core::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const PROCESSED_FILE: &str = "processed.json";
const SPLITS_FILE: &str = "splits.json";
const LOAD_REPORT_FILE: &str = "load_report.json";

/// Knowledge tracing with concept-route relevance masking.
#[derive(Parser, Debug)]
#[command(name = "routekt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Clean, expand, truncate and split raw interaction logs
    Preprocess(PreprocessArgs),
    /// Write the relevance matrix and statistics of every sequence
    Relmat(RelmatArgs),
    /// Generate a synthetic dataset with route-dependent mastery
    Synth(SynthArgs),
    /// Train with early stopping, over all folds or one
    Train(TrainArgs),
    /// Score a checkpoint on a preprocessed dataset
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Interactions file, one JSON student record per line
    #[arg(long)]
    data: PathBuf,
    /// Questions file, one JSON question record per line
    #[arg(long)]
    questions: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// TOML file with any of: max_len, min_interactions, seed
    #[arg(long)]
    config: Option<PathBuf>,
    /// Split seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Keep the most recent entries up to this length [default: 200]
    #[arg(long)]
    max_len: Option<usize>,
    /// Drop students with fewer interactions [default: 3]
    #[arg(long)]
    min_interactions: Option<usize>,
}

#[derive(Args, Debug)]
struct RelmatArgs {
    /// Preprocessed dataset (file or directory)
    #[arg(long)]
    data: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Only this student
    #[arg(long)]
    student: Option<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// TOML file with SynthSpec fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generator seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Root subjects [default: 2]
    #[arg(long)]
    roots: Option<usize>,
    /// Concept levels from root to leaf [default: 3]
    #[arg(long)]
    depth: Option<usize>,
    /// Children per concept [default: 5]
    #[arg(long)]
    branching: Option<usize>,
    /// Questions per leaf concept [default: 4]
    #[arg(long)]
    questions_per_leaf: Option<usize>,
    /// Students [default: 500]
    #[arg(long)]
    students: Option<usize>,
    /// Shortest sequence [default: 3]
    #[arg(long)]
    min_len: Option<usize>,
    /// Longest sequence [default: 100]
    #[arg(long)]
    max_len: Option<usize>,
    /// Mastery gain per related exposure [default: 0.25]
    #[arg(long)]
    gain: Option<f64>,
    /// Guess probability [default: 0.2]
    #[arg(long)]
    guess: Option<f64>,
    /// Slip probability [default: 0.1]
    #[arg(long)]
    slip: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct ModelFlags {
    /// TOML file with TrainConfig fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Initialisation and shuffling seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding dimension [default: 64]
    #[arg(long)]
    dim: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long)]
    heads: Option<usize>,
    /// Blocks per attention stack [default: 2]
    #[arg(long)]
    blocks: Option<usize>,
    /// Adam learning rate [default: 0.0001]
    #[arg(long)]
    lr: Option<f64>,
    /// Sequences per gradient step [default: 64]
    #[arg(long)]
    batch: Option<usize>,
    /// Maximum epochs [default: 200]
    #[arg(long)]
    epochs: Option<usize>,
    /// Epochs without validation improvement before stopping [default: 10]
    #[arg(long)]
    patience: Option<usize>,
    /// Disable relevance masking
    #[arg(long)]
    no_mask: bool,
    /// Worker threads [default: 1]
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Preprocessed dataset (file or directory)
    #[arg(long)]
    data: PathBuf,
    /// Run directory
    #[arg(long)]
    out: PathBuf,
    /// Train only this fold instead of all five
    #[arg(long)]
    fold: Option<usize>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Preprocessed dataset (file or directory)
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to score
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Sequences to score: test, all, or fold index
    #[arg(long, default_value = "test")]
    split: String,
    /// Disable relevance masking (default: as trained)
    #[arg(long)]
    no_mask: bool,
    /// Sequences per evaluation chunk
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Worker threads
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PreprocessSettings {
    max_len: usize,
    min_interactions: usize,
    seed: u64,
}

impl Default for PreprocessSettings {
    fn default() -> Self {
        let d = PreprocessConfig::default();
        PreprocessSettings {
            max_len: d.max_len,
            min_interactions: d.min_interactions,
            seed: 0,
        }
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Error> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn resolve_train(flags: &ModelFlags) -> Result<TrainConfig, Error> {
    let mut c: TrainConfig = load_config(flags.config.as_deref())?;
    set(&mut c.seed, flags.seed);
    set(&mut c.dim, flags.dim);
    set(&mut c.heads, flags.heads);
    set(&mut c.blocks, flags.blocks);
    set(&mut c.lr, flags.lr);
    set(&mut c.batch_size, flags.batch);
    set(&mut c.max_epochs, flags.epochs);
    set(&mut c.patience, flags.patience);
    set(&mut c.threads, flags.threads);
    if flags.no_mask {
        c.mask_enabled = false;
    }
    c.validate()?;
    Ok(c)
}

fn resolve_synth(a: &SynthArgs) -> Result<SynthSpec, Error> {
    let mut s: SynthSpec = load_config(a.config.as_deref())?;
    set(&mut s.seed, a.seed);
    set(&mut s.roots, a.roots);
    set(&mut s.depth, a.depth);
    set(&mut s.branching, a.branching);
    set(&mut s.questions_per_leaf, a.questions_per_leaf);
    set(&mut s.students, a.students);
    set(&mut s.min_len, a.min_len);
    set(&mut s.max_len, a.max_len);
    set(&mut s.gain, a.gain);
    set(&mut s.guess, a.guess);
    set(&mut s.slip, a.slip);
    s.validate()?;
    Ok(s)
}

fn dataset_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(PROCESSED_FILE)
    } else {
        p.to_path_buf()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// The stored split next to the dataset, or a fresh one from `seed`.
fn load_split(dataset: &Path, n: usize, seed: u64) -> Result<DatasetSplit, Error> {
    let stored = dataset.with_file_name(SPLITS_FILE);
    if stored.exists() {
        let split: DatasetSplit = serde_json::from_slice(&std::fs::read(&stored)?)?;
        let covered = split.test.len() + split.folds.iter().map(Vec::len).sum::<usize>();
        if covered != n {
            return Err(Error::Integrity(format!(
                "{} covers {covered} sequences, dataset has {n}",
                stored.display()
            )));
        }
        return Ok(split);
    }
    make_splits(n, seed)
}

fn run_preprocess(a: &PreprocessArgs) -> Result<(), Error> {
    let mut s: PreprocessSettings = load_config(a.config.as_deref())?;
    set(&mut s.seed, a.seed);
    set(&mut s.max_len, a.max_len);
    set(&mut s.min_interactions, a.min_interactions);
    if s.max_len == 0 {
        return Err(Error::Validation("max-len must be positive".into()));
    }
    let manifest = RunManifest::new("preprocess", &s, Some(s.seed))?.with_inputs(&[&a.data, &a.questions])?;
    manifest.write(&a.out)?;

    let loaded = data::load_dataset(&a.data, &a.questions)?;
    let config = PreprocessConfig {
        max_len: s.max_len,
        min_interactions: s.min_interactions,
    };
    let mut ds = preprocess(&loaded, config)?;
    ds.set_input_hashes(manifest.input_hashes.clone())?;
    let split = make_splits(ds.sequences.len(), s.seed)?;
    ds.save(&a.out.join(PROCESSED_FILE))?;
    write_json(&a.out.join(SPLITS_FILE), &split)?;
    write_json(
        &a.out.join(LOAD_REPORT_FILE),
        &serde_json::json!({"load": loaded.report, "pipeline": ds.report}),
    )?;
    let r = &ds.report;
    log::info!(
        "{} sequences, {} entries kept ({} read, {} incomplete, {} filtered, {} truncated)",
        ds.sequences.len(),
        r.entries_kept,
        r.interactions_read,
        r.dropped_incomplete,
        r.interactions_filtered,
        r.entries_truncated
    );
    Ok(())
}

fn run_relmat(a: &RelmatArgs) -> Result<(), Error> {
    let path = dataset_path(&a.data);
    let manifest = RunManifest::new("relmat", &serde_json::json!({"student": a.student}), None)?
        .with_inputs(&[&path])?;
    manifest.write(&a.out)?;
    let ds = ProcessedDataset::load(&path)?;
    let table = ds.route_table()?;
    let mut matrices = String::new();
    let mut stats = String::new();
    let mut found = false;
    for seq in &ds.sequences {
        if a.student.as_ref().is_some_and(|s| s != &seq.student_id) {
            continue;
        }
        found = true;
        let f = build_relevance_matrix(&seq.questions(), &table);
        let st = relevance_stats(&f);
        let _ = writeln!(matrices, "# {} n={}", seq.student_id, f.len());
        matrices.push_str(&f.to_text());
        let _ = writeln!(stats, "# {}", seq.student_id);
        stats.push_str(&st.to_text());
    }
    if !found {
        return Err(Error::Lookup(format!("student {:?} not in dataset", a.student)));
    }
    std::fs::write(a.out.join("relmat.txt"), matrices)?;
    std::fs::write(a.out.join("relmat_stats.txt"), stats)?;
    log::info!("{} distinct question pairs evaluated", table.cached_pairs());
    Ok(())
}

fn run_synth(a: &SynthArgs) -> Result<(), Error> {
    let spec = resolve_synth(a)?;
    RunManifest::new("synth", &spec, Some(spec.seed))?.write(&a.out)?;
    let ds = generate(&spec)?;
    let files = ds.write(&a.out)?;
    log::info!(
        "{} students, {} questions written to {}",
        ds.students.len(),
        ds.routes.len(),
        files.interactions.parent().unwrap_or(Path::new(".")).display()
    );
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<(), Error> {
    let config = resolve_train(&a.model)?;
    let path = dataset_path(&a.data);
    let manifest = RunManifest::new("train", &serde_json::json!({
            "train": config,
            "fold": a.fold,
            "early_stopping": {"metric": EARLY_STOP_METRIC, "patience": config.patience},
        }), Some(config.seed))?
        .with_inputs(&[&path])?;
    manifest.write(&a.out)?;
    let ds = ProcessedDataset::load(&path)?;
    let table = ds.route_table()?;
    let prepared = PreparedData::from_dataset(&ds, &table);
    let split = load_split(&path, prepared.len(), config.seed)?;
    let run = RunDir::create(&a.out)?;
    match a.fold {
        Some(k) => {
            let (train, val) = split.fold(k)?;
            let fold = FoldIndices {
                train,
                val,
                test: split.test.clone(),
            };
            let out = train_fold(&config, &prepared, &fold, Some(&run))?;
            log::info!(
                "best epoch {} of {}: val AUC {:?}, test AUC {:?}",
                out.best_epoch,
                out.history.len(),
                out.val_report.auc,
                out.test_report.and_then(|r| r.auc)
            );
        }
        None => {
            let rep = cross_validate(&config, &prepared, &split, Some(&run))?;
            log::info!(
                "test AUC {:.4} +/- {:.4}, accuracy {:.4} +/- {:.4}",
                rep.test.auc_mean,
                rep.test.auc_std,
                rep.test.accuracy_mean,
                rep.test.accuracy_std
            );
        }
    }
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<(), Error> {
    let path = dataset_path(&a.data);
    let manifest = RunManifest::new(
        "eval",
        &serde_json::json!({
            "split": a.split,
            "no_mask": a.no_mask,
            "batch": a.batch,
            "threads": a.threads,
        }),
        None,
    )?
    .with_inputs(&[&path, &a.checkpoint])?;
    manifest.write(&a.out)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let trained_mask = ck
        .meta
        .get("train_config")
        .and_then(|c| c.get("mask_enabled"))
        .and_then(serde_json::Value::as_bool)
        .unwrap_or(true);
    let mask = trained_mask && !a.no_mask;
    let ds = ProcessedDataset::load(&path)?;
    let table = ds.route_table()?;
    let prepared = PreparedData::from_dataset(&ds, &table);
    let indices: Vec<usize> = match a.split.as_str() {
        "all" => (0..prepared.len()).collect(),
        "test" => load_split(&path, prepared.len(), 0)?.test,
        other => {
            let k: usize = other
                .parse()
                .map_err(|_| Error::Validation(format!("split must be test, all or a fold index, got {other}")))?;
            load_split(&path, prepared.len(), 0)?.fold(k)?.1
        }
    };
    let report = evaluate(&ck.params, &prepared, &indices, mask, a.batch, a.threads)?;
    write_json(&a.out.join("report.json"), &report)?;
    let mut summary = BTreeMap::new();
    summary.insert("auc", report.auc.map_or("undefined".to_string(), |v| format!("{v:.6}")));
    summary.insert("accuracy", format!("{:.6}", report.accuracy));
    summary.insert("predictions", report.count.to_string());
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn category(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } | Error::Contract(_) => "internal",
        Error::Validation(_) => "validation",
        Error::Lookup(_) => "lookup",
        Error::Integrity(_) => "integrity",
        Error::Parse { .. } | Error::Json(_) => "parse",
        Error::UndefinedMetric(_) => "metric",
        Error::NonFinite(_) => "numeric",
        Error::Io(_) => "io",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match &cli.command {
        Command::Preprocess(a) => run_preprocess(a),
        Command::Relmat(a) => run_relmat(a),
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", category(&e));
            ExitCode::from(1)
        }
    }
}
