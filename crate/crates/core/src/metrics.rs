//! Evaluation of selection quality, pseudo-label quality, accuracy and
//! memorization. Everything here is a pure function of its inputs.

use std::io::Write;

use thiserror::Error;

use crate::datasets::{augment_rows, AugmentationSpec, LabeledDataset, Strength};
use crate::model::{ModelError, TwinNetworks};
use crate::ndkernel::{argmax, Matrix};
use crate::rng::tags;
use crate::selection::{DivergenceReport, SelectionResult};
use crate::ssl::{guess_pseudo_labels, SslError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("ROC-AUC is undefined: {clean} truly-clean and {noisy} truly-noisy samples")]
    UndefinedAuc { clean: usize, noisy: usize },
    #[error("metric needs a non-empty set: {0}")]
    Empty(&'static str),
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// The clean set was empty and `precision` is the conventional 1.
    pub empty_selection: bool,
}

fn truly_clean(ds: &LabeledDataset, i: usize) -> bool {
    ds.given_labels()[i] == ds.true_labels()[i]
}

/// A sample is truly clean when its given label equals its true label.
/// With no truly-clean samples at all, recall is 1.
pub fn selection_precision_recall(sel: &SelectionResult, ds: &LabeledDataset) -> PrecisionRecall {
    let hits = sel
        .clean_indices
        .iter()
        .filter(|&&i| truly_clean(ds, i))
        .count();
    let total_clean = (0..ds.len()).filter(|&i| truly_clean(ds, i)).count();
    let recall = if total_clean == 0 {
        1.0
    } else {
        hits as f64 / total_clean as f64
    };
    if sel.clean_indices.is_empty() {
        return PrecisionRecall {
            precision: 1.0,
            recall: 0.0,
            empty_selection: true,
        };
    }
    PrecisionRecall {
        precision: hits as f64 / sel.clean_indices.len() as f64,
        recall,
        empty_selection: false,
    }
}

/// AUC of the cleanness score `1 - d` separating truly-clean from
/// truly-noisy samples, by the rank-sum statistic with mid-ranks for ties.
pub fn roc_auc(report: &DivergenceReport, ds: &LabeledDataset) -> Result<f64, MetricsError> {
    if report.len() != ds.len() {
        return Err(MetricsError::LengthMismatch {
            what: "divergence report",
            expected: ds.len(),
            got: report.len(),
        });
    }
    let is_clean: Vec<bool> = (0..ds.len()).map(|i| truly_clean(ds, i)).collect();
    auc_from_scores(&report.d, &is_clean)
}

/// Rank-sum AUC where a lower `d` ranks a sample as more likely positive.
pub fn auc_from_scores(d: &[f64], positive: &[bool]) -> Result<f64, MetricsError> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::UndefinedAuc {
            clean: n_pos,
            noisy: n_neg,
        });
    }
    // ascending cleanness is descending d; ranking on d avoids the rounding
    // of 1 - d merging distinct values
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && d[order[end]] == d[order[start]] {
            end += 1;
        }
        // one-based ranks start+1 ..= end share their mean
        let mid = (start + 1 + end) as f64 / 2.0;
        let positives = order[start..end].iter().filter(|&&i| positive[i]).count();
        rank_sum += mid * positives as f64;
        start = end;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean over classes present in `truth` of the per-class recall.
pub fn macro_recall(
    predicted: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<f64, MetricsError> {
    if predicted.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            what: "predictions",
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    let mut support = vec![0usize; num_classes];
    let mut hits = vec![0usize; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        support[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| support[c] > 0).collect();
    if present.is_empty() {
        return Err(MetricsError::Empty("noisy set"));
    }
    let total: f64 = present
        .iter()
        .map(|&c| hits[c] as f64 / support[c] as f64)
        .sum();
    Ok(total / present.len() as f64)
}

/// Macro recall of the argmax of the pseudo-labels against the true labels,
/// over `noisy_indices`. Weak views are drawn from a fixed evaluation stream
/// so the metric does not perturb training randomness.
pub fn pseudo_label_recall(
    twins: &TwinNetworks,
    ds: &LabeledDataset,
    noisy_indices: &[usize],
    temperature: f64,
    augmentation: &AugmentationSpec,
    seed: u64,
) -> Result<f64, MetricsError> {
    if noisy_indices.is_empty() {
        return Err(MetricsError::Empty("noisy set"));
    }
    let u = ds.features().select_rows(noisy_indices);
    let w1 = augment_rows(&u, augmentation, Strength::Weak, seed, &[tags::EVAL, 0]);
    let w2 = augment_rows(&u, augmentation, Strength::Weak, seed, &[tags::EVAL, 1]);
    let q = guess_pseudo_labels(twins, [&w1, &w2], temperature)?;
    let predicted: Vec<usize> = (0..q.rows()).map(|r| q.argmax_row(r)).collect();
    let truth: Vec<usize> = noisy_indices.iter().map(|&i| ds.true_labels()[i]).collect();
    macro_recall(&predicted, &truth, ds.num_classes())
}

/// Fraction of rows whose argmax (ties to the lowest class) equals the label.
pub fn accuracy_from_probs(probs: &Matrix, labels: &[usize]) -> Result<f64, MetricsError> {
    if probs.rows() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            what: "labels",
            expected: probs.rows(),
            got: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty("accuracy"));
    }
    let correct = probs
        .iter_rows()
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Ensemble accuracy. Against given training labels this measures
/// memorization.
pub fn accuracy(
    twins: &TwinNetworks,
    features: &Matrix,
    labels: &[usize],
) -> Result<f64, MetricsError> {
    accuracy_from_probs(&twins.ensemble_softmax(features)?, labels)
}

/// Selected-sample count per given class.
pub fn class_histogram(
    sel: &SelectionResult,
    given_labels: &[usize],
    num_classes: usize,
) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for &i in &sel.clean_indices {
        counts[given_labels[i]] += 1;
    }
    counts
}

/// Column order of the per-epoch metrics CSV.
pub const CSV_HEADER: [&str; 14] = [
    "epoch",
    "phase",
    "R",
    "d_cutoff",
    "precision",
    "recall",
    "roc_auc",
    "pseudo_recall",
    "test_acc",
    "train_acc_given",
    "loss_lx",
    "loss_lu",
    "loss_reg",
    "loss_lc",
];

/// Selection-related fields, absent during warmup.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMetrics {
    pub filter_rate: f64,
    pub d_cutoff: f64,
    pub precision: f64,
    pub recall: f64,
    /// Undefined when the training set is all clean or all noisy.
    pub roc_auc: Option<f64>,
    /// Undefined when the noisy set is empty.
    pub pseudo_recall: Option<f64>,
    pub selected_per_class: Vec<usize>,
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    pub phase: String,
    pub selection: Option<SelectionMetrics>,
    pub test_accuracy: f64,
    pub train_accuracy_on_given: f64,
    pub loss_lx: f64,
    pub loss_lu: f64,
    pub loss_reg: f64,
    pub loss_lc: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EpochMetrics {
    pub fn csv_record(&self) -> Vec<String> {
        let s = self.selection.as_ref();
        vec![
            self.epoch.to_string(),
            self.phase.clone(),
            opt(s.map(|s| s.filter_rate)),
            opt(s.map(|s| s.d_cutoff)),
            opt(s.map(|s| s.precision)),
            opt(s.map(|s| s.recall)),
            opt(s.and_then(|s| s.roc_auc)),
            opt(s.and_then(|s| s.pseudo_recall)),
            self.test_accuracy.to_string(),
            self.train_accuracy_on_given.to_string(),
            self.loss_lx.to_string(),
            self.loss_lu.to_string(),
            self.loss_reg.to_string(),
            self.loss_lc.to_string(),
        ]
    }
}

/// Writes the header and one row per epoch.
pub fn write_metrics_csv<W: Write>(rows: &[EpochMetrics], writer: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for row in rows {
        w.write_record(row.csv_record())?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
