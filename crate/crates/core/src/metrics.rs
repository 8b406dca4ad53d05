//! Classification metrics: accuracy, macro F1, macro recall, and
//! one-vs-rest AUC.
//!
//! AUC is computed per class over softmax probabilities with the
//! Mann-Whitney rank statistic, crediting ties half a win, then
//! macro-averaged. Classes absent from the true labels are excluded from
//! the macro averages and reported so callers can surface a warning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub auc: f64,
    pub f1_macro: f64,
    pub recall_macro: f64,
    /// Classes with no true examples, excluded from the macro averages.
    pub absent_classes: Vec<usize>,
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mann-Whitney AUC of scores for one binary split, ties credited 0.5.
fn auc_binary(scores: &[f64], positive: &[bool]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Average ranks across tied score runs (1-based ranks).
    let mut rank = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            rank[order[k]] = avg;
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = n - n_pos;
    debug_assert!(n_pos > 0 && n_neg > 0);
    let sum_pos: f64 = (0..n).filter(|&i| positive[i]).map(|i| rank[i]).sum();
    let u = sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos * n_neg) as f64
}

/// Evaluate logits against true labels.
pub fn evaluate(logits: &Matrix, labels: &[usize]) -> Result<MetricReport> {
    let (n, classes) = logits.shape();
    if n == 0 || classes < 2 {
        return Err(Error::contract(format!(
            "evaluation needs rows and at least 2 classes, got {n}x{classes}"
        )));
    }
    if labels.len() != n {
        return Err(Error::contract(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }

    let preds: Vec<usize> = (0..n).map(|i| argmax(logits.row(i))).collect();
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    let accuracy = correct as f64 / n as f64;

    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        support[y] += 1;
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }

    let present: Vec<usize> = (0..classes).filter(|&c| support[c] > 0).collect();
    let absent_classes: Vec<usize> = (0..classes).filter(|&c| support[c] == 0).collect();

    let mut f1_sum = 0.0;
    let mut recall_sum = 0.0;
    for &c in &present {
        let recall = tp[c] as f64 / (tp[c] + fn_[c]) as f64;
        let predicted = tp[c] + fp[c];
        let precision = if predicted == 0 {
            0.0
        } else {
            tp[c] as f64 / predicted as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        recall_sum += recall;
        f1_sum += f1;
    }
    let f1_macro = f1_sum / present.len() as f64;
    let recall_macro = recall_sum / present.len() as f64;

    let probs = logits.softmax_rows()?;
    let mut auc_sum = 0.0;
    let mut auc_classes = 0;
    for &c in &present {
        if support[c] == n {
            // No negatives: AUC undefined for this class.
            continue;
        }
        let scores: Vec<f64> = (0..n).map(|i| probs.get(i, c)).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        auc_sum += auc_binary(&scores, &positive);
        auc_classes += 1;
    }
    // A single-class label set leaves no class with both positives and
    // negatives; report the chance level.
    let auc = if auc_classes == 0 {
        0.5
    } else {
        auc_sum / auc_classes as f64
    };

    Ok(MetricReport {
        accuracy,
        auc,
        f1_macro,
        recall_macro,
        absent_classes,
    })
}
