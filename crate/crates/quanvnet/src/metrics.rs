//! Classification metrics: accuracy, confusion matrix, macro recall/F1,
//! binary AUC, and the line-delimited results log.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("record holds no samples")]
    EmptyRecord,
    #[error("{scores} score row(s) but {labels} label(s)")]
    ShapeMismatch { scores: usize, labels: usize },
    #[error("sample {sample}: score row has {got} entries, expected {expected}")]
    RowLength {
        sample: usize,
        expected: usize,
        got: usize,
    },
    #[error("sample {sample}: scores are not a probability vector ({reason})")]
    NotAProbability { sample: usize, reason: String },
    #[error("label {label} outside class count {classes}")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("non-finite score {0}")]
    NonFiniteScore(f64),
    #[error("AUC needs both classes present")]
    SingleClass,
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("results log line {line}: {source}")]
    BadLogLine {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Per-sample class-probability rows with true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    scores: Vec<Vec<f64>>,
    labels: Vec<u8>,
    n_classes: usize,
}

impl EvalRecord {
    /// Validates shapes, that every row is a probability vector (entries
    /// >= 0, sum within 1e-9 of 1), and that labels fit the class count.
    pub fn new(scores: Vec<Vec<f64>>, labels: Vec<u8>) -> Result<Self, MetricsError> {
        if scores.len() != labels.len() {
            return Err(MetricsError::ShapeMismatch {
                scores: scores.len(),
                labels: labels.len(),
            });
        }
        if scores.is_empty() {
            return Err(MetricsError::EmptyRecord);
        }
        let n_classes = scores[0].len();
        for (sample, row) in scores.iter().enumerate() {
            if row.len() != n_classes {
                return Err(MetricsError::RowLength {
                    sample,
                    expected: n_classes,
                    got: row.len(),
                });
            }
            let mut sum = 0.0;
            for &p in row {
                if !p.is_finite() || p < 0.0 {
                    return Err(MetricsError::NotAProbability {
                        sample,
                        reason: format!("entry {p}"),
                    });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(MetricsError::NotAProbability {
                    sample,
                    reason: format!("sum {sum}"),
                });
            }
        }
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(MetricsError::LabelOutOfRange {
                label,
                classes: n_classes,
            });
        }
        Ok(EvalRecord {
            scores,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Argmax class per sample; ties go to the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        self.scores
            .iter()
            .map(|row| {
                let mut best = 0;
                for (j, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// The probability assigned to one class, per sample.
    pub fn class_scores(&self, class: usize) -> Vec<f64> {
        self.scores.iter().map(|row| row[class]).collect()
    }
}

/// Fraction of samples whose argmax matches the label, as a percentage.
pub fn accuracy(record: &EvalRecord) -> f64 {
    let correct = record
        .predictions()
        .iter()
        .zip(record.labels())
        .filter(|(&pred, &label)| pred == label as usize)
        .count();
    100.0 * correct as f64 / record.len() as f64
}

/// K x K counts, row = true class, column = predicted class.
pub fn confusion_matrix(record: &EvalRecord) -> Vec<Vec<usize>> {
    let k = record.n_classes();
    let mut matrix = vec![vec![0usize; k]; k];
    for (pred, &label) in record.predictions().into_iter().zip(record.labels()) {
        matrix[label as usize][pred] += 1;
    }
    matrix
}

/// Unweighted class means of recall and F1. Classes with no support or no
/// predictions score 0 under the 0/0 convention.
pub fn recall_f1(record: &EvalRecord) -> (f64, f64) {
    let matrix = confusion_matrix(record);
    let k = record.n_classes();
    let mut recall_sum = 0.0;
    let mut f1_sum = 0.0;
    for (class, row) in matrix.iter().enumerate() {
        let tp = row[class] as f64;
        let actual: f64 = row.iter().sum::<usize>() as f64;
        let predicted: f64 = (0..k).map(|r| matrix[r][class]).sum::<usize>() as f64;
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        recall_sum += recall;
        f1_sum += f1;
    }
    (recall_sum / k as f64, f1_sum / k as f64)
}

/// Area under the ROC curve by the Mann-Whitney rank formulation with
/// midranks for tied scores: (sum of positive ranks - P(P+1)/2) / (P*N).
pub fn auc_binary(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::ShapeMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::EmptyRecord);
    }
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(s));
    }
    if let Some(&label) = labels.iter().find(|&&l| l > 1) {
        return Err(MetricsError::LabelOutOfRange { label, classes: 2 });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut positive_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks are 1-based; every member of a tie group gets the midrank.
        let midrank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            if labels[i] == 1 {
                positive_rank_sum += midrank;
            }
        }
        start = end;
    }
    let p = positives as f64;
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Mean and sample standard deviation (n-1 denominator; 0 when n < 2).
pub fn aggregate(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One evaluation, as appended to the line-delimited results log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub task: String,
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    pub accuracy: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

/// Appends one JSON line to the results log, creating the file if needed.
pub fn append_record(path: &Path, record: &MetricsRecord) -> Result<(), MetricsError> {
    use std::io::Write;
    let io_err = |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err)?;
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(file, "{line}").map_err(io_err)
}

/// Reads every record back from a results log.
pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|source| MetricsError::BadLogLine {
                line: i + 1,
                source,
            })
        })
        .collect()
}
