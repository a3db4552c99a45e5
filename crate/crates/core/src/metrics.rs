//! Correspondence and classification scores.
//!
//! Correspondence metrics are computed per sample over all matrix entries
//! (micro-averaged) and then averaged across samples.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correspondence::{binarize, normalize, CorrespondenceMatrix};
use crate::error::{Error, Result};

pub const DEFAULT_PRED_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub precision: f64,
    pub recall: f64,
    pub average_precision: f64,
    pub samples: usize,
    pub tau_gt: f64,
    pub tau_pred: f64,
    /// Samples whose ground truth had no positives.
    pub empty_ground_truth: usize,
}

/// Average precision of a ranking: entries sorted by descending score with
/// ties kept in index order, AP = mean over positives of precision at the
/// positive's rank. Returns `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let total = labels.iter().filter(|&&l| l).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps index order among equal scores.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
            if hits == total {
                break;
            }
        }
    }
    Some(sum / total as f64)
}

/// Precision and recall of `score >= tau`. Precision is 0 when nothing is
/// predicted positive; recall is 0 when nothing is truly positive.
pub fn precision_recall(scores: &[f64], labels: &[bool], tau: f64) -> (f64, f64) {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= tau, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 0.0 };
    (precision, recall)
}

/// Scores one predicted matrix (row-major, values in `[0, 1]`) against
/// ground truth.
pub fn correspondence_metrics(
    pred: &[f64],
    gt: &CorrespondenceMatrix,
    tau_gt: f64,
    tau_pred: f64,
) -> Result<EvalReport> {
    let n = gt.rows * gt.cols;
    if pred.len() != n {
        return Err(Error::Shape {
            expected: gt.shape(),
            got: (pred.len(), 1),
        });
    }
    let target = normalize(gt).to_dense();
    let mse = pred
        .iter()
        .zip(&target)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / n.max(1) as f64;
    let labels = binarize(gt, tau_gt)?;
    let (precision, recall, ap, empty) = match average_precision(pred, &labels) {
        Some(ap) => {
            let (p, r) = precision_recall(pred, &labels, tau_pred);
            (p, r, ap, 0)
        }
        None => (0.0, 0.0, 0.0, 1),
    };
    Ok(EvalReport {
        mse,
        precision,
        recall,
        average_precision: ap,
        samples: 1,
        tau_gt,
        tau_pred,
        empty_ground_truth: empty,
    })
}

/// Mean of per-sample reports, summed in slice order.
pub fn mean_report(reports: &[EvalReport]) -> Option<EvalReport> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(EvalReport {
        mse: mean(|r| r.mse),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        average_precision: mean(|r| r.average_precision),
        samples: reports.iter().map(|r| r.samples).sum(),
        tau_gt: first.tau_gt,
        tau_pred: first.tau_pred,
        empty_ground_truth: reports.iter().map(|r| r.empty_ground_truth).sum(),
    })
}

impl EvalReport {
    /// Appends one row to a results table, writing the header for a new file.
    pub fn append_csv(&self, path: &Path, name: &str) -> Result<()> {
        let fresh = !path.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut s = String::new();
        if fresh {
            s.push_str("model,samples,mse,precision,recall,ap\n");
        }
        s.push_str(&format!(
            "{name},{},{:.6e},{:.4},{:.4},{:.4}\n",
            self.samples, self.mse, self.precision, self.recall, self.average_precision
        ));
        f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub kappa: f64,
    /// Chance agreement was 1, so kappa is undefined and reported as 0.
    pub kappa_degenerate: bool,
    pub samples: usize,
}

pub fn classification_metrics(
    probs: &[f64],
    labels: &[bool],
    tau: f64,
) -> Result<ClassificationReport> {
    if probs.is_empty() {
        return Err(Error::invalid("classification metrics need at least one sample"));
    }
    if probs.len() != labels.len() {
        return Err(Error::Shape {
            expected: (labels.len(), 1),
            got: (probs.len(), 1),
        });
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &l) in probs.iter().zip(labels) {
        match (p >= tau, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, false) => tn += 1.0,
            (false, true) => fneg += 1.0,
        }
    }
    let n = probs.len() as f64;
    let p_o = (tp + tn) / n;
    let p_e = ((tp + fp) * (tp + fneg) + (fneg + tn) * (fp + tn)) / (n * n);
    let degenerate = p_e >= 1.0;
    Ok(ClassificationReport {
        accuracy: p_o,
        precision: if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 },
        recall: if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 },
        kappa: if degenerate { 0.0 } else { (p_o - p_e) / (1.0 - p_e) },
        kappa_degenerate: degenerate,
        samples: probs.len(),
    })
}
