use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    /// Mean over classes of step-integrated precision-recall area.
    pub map: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub per_class_ap: Vec<Option<f64>>,
    /// Classes with no sample in `labels`; left out of the macro means.
    pub absent_classes: Vec<usize>,
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// Index of the largest logit; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Average precision of one class: `Σ (R_k − R_{k−1}) · P_k` over the
/// distinct score thresholds in decreasing order.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Accuracy, mAP, macro-F1 and weighted-F1 of `[n][C]` logits.
pub fn classification_report(logits: &[Vec<f64>], labels: &[usize]) -> Result<ClassificationReport> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let Some(first) = logits.first() else {
        return Err(Error::Degenerate("classification report over no samples".into()));
    };
    let c = first.len();
    if c == 0 || logits.iter().any(|r| r.len() != c) {
        return Err(Error::Shape("logit rows must share a non-zero width".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
    }
    let n = labels.len();
    let predicted: Vec<usize> = logits.iter().map(|r| argmax(r)).collect();
    let probs: Vec<Vec<f64>> = logits.iter().map(|r| softmax(r)).collect();

    let accuracy = predicted.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / n as f64;

    let mut per_class_f1 = Vec::with_capacity(c);
    let mut per_class_ap = Vec::with_capacity(c);
    let mut absent = Vec::new();
    let (mut f1_sum, mut ap_sum, mut weighted, mut present) = (0.0, 0.0, 0.0, 0usize);
    for k in 0..c {
        let support = labels.iter().filter(|&&l| l == k).count();
        let tp = predicted
            .iter()
            .zip(labels)
            .filter(|(p, l)| **p == k && **l == k)
            .count();
        let predicted_k = predicted.iter().filter(|&&p| p == k).count();
        let precision = if predicted_k == 0 { 0.0 } else { tp as f64 / predicted_k as f64 };
        let recall = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class_f1.push(f1);
        let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        let ap = average_precision(&scores, &positive);
        per_class_ap.push(ap);
        if support == 0 {
            absent.push(k);
            continue;
        }
        present += 1;
        f1_sum += f1;
        ap_sum += ap.unwrap_or(0.0);
        weighted += f1 * support as f64;
    }
    if !absent.is_empty() {
        log::warn!("classes {absent:?} have no samples; excluded from macro averages");
    }
    Ok(ClassificationReport {
        accuracy,
        map: ap_sum / present as f64,
        macro_f1: f1_sum / present as f64,
        weighted_f1: weighted / n as f64,
        per_class_f1,
        per_class_ap,
        absent_classes: absent,
    })
}
