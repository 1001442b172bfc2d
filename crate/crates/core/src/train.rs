//! Epoch loop with early stopping, evaluation and cross-validation.

use crate::checkpoint::Checkpoint;
use crate::data::{DatasetSplit, ProcessedDataset};
use crate::error::{Error, Result};
use crate::graph::GraphDiagnostics;
use crate::metrics::{summarize, FoldSummary, MetricReport};
use crate::model::{accumulate_sequence_grads, forward, ModelConfig, ModelParams, SequenceInput, SequenceLoss};
use crate::optim::{adam_step, AdamState};
use crate::params::ParamGrads;
use crate::relevance::{RelevanceMatrix, RouteTable};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Metric that selects the best epoch and drives early stopping.
pub const EARLY_STOP_METRIC: &str = "val_auc";

/// Offset separating the shuffling stream from the initialisation stream.
const SHUFFLE_STREAM: u64 = 0x5eed_5eed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(alias = "batch")]
    pub batch_size: usize,
    #[serde(alias = "epochs")]
    pub max_epochs: usize,
    /// Epochs without a validation-AUC improvement before stopping.
    pub patience: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub seed: u64,
    /// `false` replaces every relevance matrix with all ones.
    pub mask_enabled: bool,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            dim: 64,
            heads: 4,
            blocks: 2,
            seed: 0,
            mask_enabled: true,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Validation(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, v) in [
            ("batch size", self.batch_size),
            ("max epochs", self.max_epochs),
            ("dim", self.dim),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("threads", self.threads),
        ] {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if self.patience >= self.max_epochs {
            return Err(Error::Validation(format!(
                "patience {} must be below max epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Validation(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, num_questions: usize, num_concepts: usize) -> ModelConfig {
        ModelConfig::new(num_questions, num_concepts, self.dim, self.heads, self.blocks)
    }
}

/// Model inputs and cached relevance matrices for every sequence.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub num_questions: usize,
    pub num_concepts: usize,
    pub inputs: Vec<SequenceInput>,
    pub relevance: Vec<RelevanceMatrix>,
}

impl PreparedData {
    pub fn from_dataset(ds: &ProcessedDataset, table: &RouteTable) -> Self {
        PreparedData {
            num_questions: ds.vocab.num_questions,
            num_concepts: ds.vocab.num_concepts,
            inputs: ds.inputs(),
            relevance: ds.relevance_matrices(table),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn mask(&self, i: usize, enabled: bool) -> Option<&RelevanceMatrix> {
        enabled.then(|| &self.relevance[i])
    }
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Probabilities of every position of the listed sequences, in order.
pub fn predict(
    params: &ModelParams,
    data: &PreparedData,
    indices: &[usize],
    mask_enabled: bool,
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    let run = |&i: &usize| -> Result<Vec<f64>> {
        Ok(forward(params, &data.inputs[i], data.mask(i, mask_enabled))?.probabilities)
    };
    if threads <= 1 {
        indices.iter().map(run).collect()
    } else {
        with_threads(threads, || indices.par_iter().map(run).collect())?
    }
}

/// AUC and accuracy over every position of the listed sequences.
///
/// Sequences are processed `batch_size` at a time; each is scored alone, so
/// the batch size never changes the result.
pub fn evaluate(
    params: &ModelParams,
    data: &PreparedData,
    indices: &[usize],
    mask_enabled: bool,
    batch_size: usize,
    threads: usize,
) -> Result<MetricReport> {
    if indices.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for chunk in indices.chunks(batch_size.max(1)) {
        for (i, probs) in chunk.iter().zip(predict(params, data, chunk, mask_enabled, threads)?) {
            scores.extend(probs);
            labels.extend_from_slice(&data.inputs[*i].responses);
        }
    }
    if scores.is_empty() {
        return Err(Error::Validation("evaluation set has no valid positions".into()));
    }
    MetricReport::from_predictions(&scores, &labels)
}

/// One line of the per-epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
    pub val_accuracy: f64,
    pub best_val_auc: Option<f64>,
    pub fully_masked_rows: usize,
    pub mean_attention_entropy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    Diverged,
}

/// Sequence indices for one training run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Held-out sequences scored with the best checkpoint, if any.
    pub test: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub val_report: MetricReport,
    pub test_report: Option<MetricReport>,
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub const CONFIG: &'static str = "config.json";
    pub const METRICS: &'static str = "metrics.jsonl";
    pub const BEST: &'static str = "best.ckpt";
    pub const REPORT: &'static str = "report.json";
    pub const CURVE: &'static str = "auc_curve.tsv";

    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn sub(&self, name: &str) -> Result<RunDir> {
        RunDir::create(&self.root.join(name))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(self.path(name), text)?;
        Ok(())
    }
}

fn reset_log(dir: Option<&RunDir>) -> Result<()> {
    if let Some(d) = dir {
        std::fs::write(d.path(RunDir::METRICS), "")?;
        std::fs::write(d.path(RunDir::CURVE), "epoch\tval_auc\n")?;
    }
    Ok(())
}

fn append_log(dir: Option<&RunDir>, rec: &EpochRecord) -> Result<()> {
    if let Some(d) = dir {
        let mut f = std::fs::OpenOptions::new().append(true).open(d.path(RunDir::METRICS))?;
        writeln!(f, "{}", serde_json::to_string(rec)?)?;
        let mut c = std::fs::OpenOptions::new().append(true).open(d.path(RunDir::CURVE))?;
        let auc = rec.val_auc.map_or_else(|| "nan".to_string(), |a| a.to_string());
        writeln!(c, "{}\t{auc}", rec.epoch)?;
    }
    Ok(())
}

struct BatchResult {
    loss_sum: f64,
    positions: usize,
    diagnostics: GraphDiagnostics,
}

/// Gradient of the position-weighted mean loss over `batch`.
///
/// Each sequence is differentiated into its own buffer and the buffers are
/// summed in batch order, so the result does not depend on the thread count.
fn batch_gradient(
    params: &ModelParams,
    data: &PreparedData,
    batch: &[usize],
    mask_enabled: bool,
    threads: usize,
) -> Result<(ParamGrads, BatchResult)> {
    let total: usize = batch.iter().map(|&i| data.inputs[i].len()).sum();
    let weight = 1.0 / total.max(1) as f64;
    let one = |&i: &usize| -> Result<(ParamGrads, SequenceLoss)> {
        let input = &data.inputs[i];
        let mut g = ParamGrads::zeros_like(&params.store);
        let l = accumulate_sequence_grads(
            params,
            input,
            data.mask(i, mask_enabled),
            input.len() as f64 * weight,
            &mut g,
        )?;
        Ok((g, l))
    };
    let parts: Vec<(ParamGrads, SequenceLoss)> = if threads <= 1 {
        batch.iter().map(one).collect::<Result<_>>()?
    } else {
        with_threads(threads, || batch.par_iter().map(one).collect::<Result<_>>())??
    };
    let mut grads = ParamGrads::zeros_like(&params.store);
    let mut res = BatchResult {
        loss_sum: 0.0,
        positions: total,
        diagnostics: GraphDiagnostics::default(),
    };
    for (g, l) in &parts {
        grads.merge(g);
        res.loss_sum += l.loss * l.predictions as f64;
        res.diagnostics.fully_masked_rows += l.diagnostics.fully_masked_rows;
        res.diagnostics.normalized_rows += l.diagnostics.normalized_rows;
        res.diagnostics.entropy_sum += l.diagnostics.entropy_sum;
    }
    Ok((grads, res))
}

fn checkpoint_meta(config: &TrainConfig, epoch: usize, val_auc: Option<f64>) -> serde_json::Value {
    serde_json::json!({
        "epoch": epoch,
        "val_auc": val_auc,
        "train_config": config,
    })
}

/// Trains one model on `fold.train`, early-stopping on validation AUC.
///
/// The returned checkpoint is the epoch with the highest validation AUC.
/// A non-finite loss or gradient stops training and keeps that checkpoint.
pub fn train_fold(
    config: &TrainConfig,
    data: &PreparedData,
    fold: &FoldIndices,
    run_dir: Option<&RunDir>,
) -> Result<FoldOutcome> {
    config.validate()?;
    if fold.train.is_empty() || fold.val.is_empty() {
        return Err(Error::Validation("training and validation sets must be non-empty".into()));
    }
    let model_cfg = config.model_config(data.num_questions, data.num_concepts);
    let mut params = ModelParams::init(&model_cfg, config.seed)?;
    let mut adam = AdamState::new(&params.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    if let Some(d) = run_dir {
        d.write_json(RunDir::CONFIG, &serde_json::json!({
            "train_config": config,
            "model_config": model_cfg,
            "fold": fold,
        }))?;
    }
    reset_log(run_dir)?;

    let mut best = Checkpoint {
        params: params.clone(),
        optimizer: Some(adam.clone()),
        meta: checkpoint_meta(config, 0, None),
    };
    let mut best_auc: Option<f64> = None;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut order = fold.train.clone();

    'epochs: for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut positions = 0;
        let mut diag = GraphDiagnostics::default();
        for batch in order.chunks(config.batch_size) {
            let (grads, res) = batch_gradient(&params, data, batch, config.mask_enabled, config.threads)?;
            if !res.loss_sum.is_finite() {
                log::error!("epoch {epoch}: loss is not finite, keeping epoch {best_epoch}");
                stop_reason = StopReason::Diverged;
                break 'epochs;
            }
            match adam_step(&mut params.store, &grads, &mut adam, config.lr) {
                Ok(()) => {}
                Err(Error::NonFinite(msg)) => {
                    log::error!("epoch {epoch}: {msg}; keeping epoch {best_epoch}");
                    stop_reason = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            loss_sum += res.loss_sum;
            positions += res.positions;
            diag.fully_masked_rows += res.diagnostics.fully_masked_rows;
            diag.normalized_rows += res.diagnostics.normalized_rows;
            diag.entropy_sum += res.diagnostics.entropy_sum;
        }
        let val = evaluate(&params, data, &fold.val, config.mask_enabled, config.batch_size, config.threads)?;
        let improved = match (val.auc, best_auc) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            (None, _) => {
                log::warn!("epoch {epoch}: validation AUC undefined");
                false
            }
        };
        if improved {
            best_auc = val.auc;
            best_epoch = epoch;
            since_best = 0;
            best = Checkpoint {
                params: params.clone(),
                optimizer: Some(adam.clone()),
                meta: checkpoint_meta(config, epoch, val.auc),
            };
            if let Some(d) = run_dir {
                best.save(&d.path(RunDir::BEST))?;
            }
        } else {
            since_best += 1;
        }
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / positions.max(1) as f64,
            val_auc: val.auc,
            val_accuracy: val.accuracy,
            best_val_auc: best_auc,
            fully_masked_rows: diag.fully_masked_rows,
            mean_attention_entropy: diag.mean_row_entropy(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val_auc {} acc {:.4}",
            rec.train_loss,
            rec.val_auc.map_or("undefined".into(), |a| format!("{a:.4}")),
            rec.val_accuracy
        );
        append_log(run_dir, &rec)?;
        history.push(rec);
        if since_best > 0 && since_best >= config.patience {
            stop_reason = StopReason::EarlyStopped;
            break;
        }
    }
    if let (Some(d), 0) = (run_dir, best_epoch) {
        // no epoch completed an evaluation; persist the starting point
        best.save(&d.path(RunDir::BEST))?;
    }

    let val_report = evaluate(&best.params, data, &fold.val, config.mask_enabled, config.batch_size, config.threads)?;
    let test_report = if fold.test.is_empty() {
        None
    } else {
        Some(evaluate(&best.params, data, &fold.test, config.mask_enabled, config.batch_size, config.threads)?)
    };
    if let Some(d) = run_dir {
        d.write_json(RunDir::REPORT, &serde_json::json!({
            "best_epoch": best_epoch,
            "stop_reason": stop_reason,
            "epochs_run": history.len(),
            "validation": val_report,
            "test": test_report,
        }))?;
    }
    Ok(FoldOutcome {
        best,
        best_epoch,
        history,
        stop_reason,
        val_report,
        test_report,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossValidationReport {
    pub folds: Vec<FoldSummaryEntry>,
    pub validation: FoldSummary,
    pub test: FoldSummary,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldSummaryEntry {
    pub fold: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
    pub validation: MetricReport,
    pub test: Option<MetricReport>,
}

/// Trains one model per fold and scores each on the shared test set.
pub fn cross_validate(
    config: &TrainConfig,
    data: &PreparedData,
    split: &DatasetSplit,
    run_dir: Option<&RunDir>,
) -> Result<CrossValidationReport> {
    let mut folds = Vec::new();
    for k in 0..split.folds.len() {
        let (train, val) = split.fold(k)?;
        let indices = FoldIndices {
            train,
            val,
            test: split.test.clone(),
        };
        let sub = run_dir.map(|d| d.sub(&format!("fold_{k}"))).transpose()?;
        let out = train_fold(config, data, &indices, sub.as_ref())?;
        log::info!(
            "fold {k}: best epoch {} val_auc {:?} test_auc {:?}",
            out.best_epoch,
            out.val_report.auc,
            out.test_report.as_ref().and_then(|r| r.auc)
        );
        folds.push(FoldSummaryEntry {
            fold: k,
            best_epoch: out.best_epoch,
            epochs_run: out.history.len(),
            stop_reason: out.stop_reason,
            validation: out.val_report,
            test: out.test_report,
        });
    }
    let val: Vec<MetricReport> = folds.iter().map(|f| f.validation.clone()).collect();
    let test: Vec<MetricReport> = folds.iter().filter_map(|f| f.test.clone()).collect();
    let report = CrossValidationReport {
        validation: summarize(&val),
        test: summarize(&test),
        folds,
    };
    if let Some(d) = run_dir {
        d.write_json(RunDir::REPORT, &report)?;
    }
    Ok(report)
}
