//! ROC AUC (Mann–Whitney form) and thresholded accuracy.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Predictions at or above this probability count as "correct".
pub const ACCURACY_THRESHOLD: f64 = 0.5;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape("metric", &[scores.len()], &[labels.len()]));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Validation(format!("label {l} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score is NaN".into()));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, with ties
/// counted as one half.
///
/// Computed from the rank sum of the positives using mid-ranks for ties.
pub fn compute_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mid_rank = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += mid_rank * tied_pos as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Fraction of predictions whose thresholded class matches the label.
pub fn accuracy(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of zero predictions".into()));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| u8::from(s >= ACCURACY_THRESHOLD) == l)
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `None` when the labels hold a single class.
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub count: usize,
    pub positives: usize,
}

impl MetricReport {
    pub fn from_predictions(scores: &[f64], labels: &[u8]) -> Result<Self> {
        let accuracy = accuracy(scores, labels)?;
        let auc = match compute_auc(scores, labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedMetric(msg)) => {
                log::warn!("{msg}");
                None
            }
            Err(e) => return Err(e),
        };
        Ok(MetricReport {
            auc,
            accuracy,
            count: scores.len(),
            positives: labels.iter().filter(|&&l| l == 1).count(),
        })
    }
}

/// Mean and sample standard deviation across folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub auc: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    /// Folds whose AUC was undefined and left out of the AUC statistics.
    pub skipped_auc: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(reports: &[MetricReport]) -> FoldSummary {
    let auc: Vec<f64> = reports.iter().filter_map(|r| r.auc).collect();
    let accuracy: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let (auc_mean, auc_std) = mean_std(&auc);
    let (accuracy_mean, accuracy_std) = mean_std(&accuracy);
    FoldSummary {
        skipped_auc: reports.len() - auc.len(),
        auc,
        accuracy,
        auc_mean,
        auc_std,
        accuracy_mean,
        accuracy_std,
    }
}
