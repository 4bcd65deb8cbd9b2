//! Binary classification and regression metrics.
//!
//! AUC is the exact Mann-Whitney statistic (ties count one half), which
//! equals the trapezoid area under the ROC staircase; both are exposed
//! so either can validate the other. Degenerate precision/recall cases
//! return 0 rather than NaN so downstream averaging stays total.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub acc: f64,
    pub pr: f64,
    pub re: f64,
    pub fs: f64,
    pub auc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub n: usize,
}

fn check_binary(name: &str, v: &[u8]) -> Result<()> {
    if v.iter().any(|&b| b > 1) {
        return Err(Error::validation(format!("{} entries must be 0 or 1", name)));
    }
    Ok(())
}

/// Accuracy, precision, recall, and F-score from 0/1 labels. Precision
/// is 0 when nothing is predicted positive, recall is 0 when nothing is
/// truly positive, and the F-score is 0 when precision + recall = 0.
pub fn classification_metrics(labels: &[u8], truth: &[u8]) -> Result<MetricsReport> {
    if labels.len() != truth.len() {
        return Err(Error::validation(format!(
            "labels ({}) and truth ({}) differ in length",
            labels.len(),
            truth.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::validation("metrics need at least one sample"));
    }
    check_binary("labels", labels)?;
    check_binary("truth", truth)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&l, &t) in labels.iter().zip(truth) {
        match (l, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 0) => tn += 1,
            _ => fn_ += 1,
        }
    }
    let n = labels.len();
    let acc = (tp + tn) as f64 / n as f64;
    let pr = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let re = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let fs = if pr + re == 0.0 { 0.0 } else { 2.0 * pr * re / (pr + re) };
    Ok(MetricsReport { acc, pr, re, fs, auc: None, tp, fp, tn, fn_, n })
}

/// Exact AUC: P(score_pos > score_neg) + 0.5 * P(tie), computed via
/// midranks. Errors when either class is absent.
pub fn auc(scores: &[f64], truth: &[u8]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::validation("scores and truth differ in length"));
    }
    check_binary("truth", truth)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("scores must be finite"));
    }
    let pos = truth.iter().filter(|&&t| t == 1).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "AUC needs both classes, got {} positive / {} negative",
            pos, neg
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based midrank shared by the tie block [i, j).
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if truth[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let p = pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// ROC staircase from (0,0) to (1,1) with one point per distinct score
/// threshold, descending. Ties produce diagonal segments.
pub fn roc_points(scores: &[f64], truth: &[u8]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != truth.len() {
        return Err(Error::validation("scores and truth differ in length"));
    }
    check_binary("truth", truth)?;
    let pos = truth.iter().filter(|&&t| t == 1).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if truth[order[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        i = j;
    }
    Ok(points)
}

/// Trapezoid area under a piecewise-linear curve over x in [0,1].
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionReport {
    pub mse: f64,
    pub mae: f64,
}

pub fn regression_metrics(pred: &[f64], target: &[f64]) -> Result<RegressionReport> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::validation("prediction and target must match and be non-empty"));
    }
    let n = pred.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    Ok(RegressionReport { mse: se / n, mae: ae / n })
}

pub const METRICS_CSV_HEADER: &str = "method,dataset,seed,acc,pr,re,fs,auc";

/// One CSV row per (method, dataset, seed). AUC column is empty when
/// undefined.
pub fn metrics_csv_row(method: &str, dataset: &str, seed: u64, r: &MetricsReport) -> String {
    let auc = r.auc.map(|a| format!("{:.6}", a)).unwrap_or_default();
    format!(
        "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
        method, dataset, seed, r.acc, r.pr, r.re, r.fs, auc
    )
}

pub const ROC_CSV_HEADER: &str = "fpr,tpr";

pub fn roc_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from(ROC_CSV_HEADER);
    out.push('\n');
    for (fpr, tpr) in points {
        out.push_str(&format!("{:.9},{:.9}\n", fpr, tpr));
    }
    out
}
