//! Ranking and thresholded classification metrics.
//!
//! AUC is computed from ranks (Mann-Whitney U with average ranks for ties)
//! in exact integer arithmetic; the float result is a single division of two
//! exact integers. A score predicts positive iff `score >= threshold`.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_scored(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order
}

/// AUC as the exact ratio `twice_u / (2 * positives * negatives)`, where
/// `twice_u` counts each correctly ordered (positive, negative) pair twice and
/// each tied pair once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AucRatio {
    pub twice_u: u128,
    pub positives: u128,
    pub negatives: u128,
}

impl AucRatio {
    pub fn value(&self) -> f64 {
        self.twice_u as f64 / (2 * self.positives * self.negatives) as f64
    }
}

pub fn roc_auc_ratio(scores: &[f64], labels: &[u8]) -> Result<AucRatio> {
    let (pos, neg) = check_scored(scores, labels)?;
    let order = ascending(scores);
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut p, mut n) = (0u128, 0u128);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        twice_u += 2 * p * neg_below + p * n;
        neg_below += n;
    }
    Ok(AucRatio {
        twice_u,
        positives: pos as u128,
        negatives: neg as u128,
    })
}

/// Area under the ROC curve.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(roc_auc_ratio(scores, labels)?.value())
}

/// Scores pre-sorted once so that AUC over many row multisets (bootstrap
/// resamples) costs one linear pass each.
#[derive(Debug, Clone)]
pub struct RankedScores {
    order: Vec<usize>,
    /// Start offsets into `order` of each tie group, plus a final sentinel.
    groups: Vec<usize>,
}

impl RankedScores {
    pub fn new(scores: &[f64]) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("scores".into()));
        }
        let order = ascending(scores);
        let mut groups = Vec::new();
        for (k, &i) in order.iter().enumerate() {
            if k == 0 || scores[i] != scores[order[k - 1]] {
                groups.push(k);
            }
        }
        groups.push(order.len());
        Ok(Self { order, groups })
    }

    /// AUC where row `i` appears `counts[i]` times. `None` if a class is
    /// absent from the multiset.
    pub fn auc_with_counts(&self, labels: &[u8], counts: &[u32]) -> Option<f64> {
        let mut twice_u: u128 = 0;
        let mut neg_below: u128 = 0;
        let mut pos_total: u128 = 0;
        for w in self.groups.windows(2) {
            let (mut p, mut n) = (0u128, 0u128);
            for &i in &self.order[w[0]..w[1]] {
                let c = u128::from(counts[i]);
                if labels[i] == 1 {
                    p += c;
                } else {
                    n += c;
                }
            }
            twice_u += 2 * p * neg_below + p * n;
            neg_below += n;
            pos_total += p;
        }
        if pos_total == 0 || neg_below == 0 {
            return None;
        }
        Some(
            AucRatio {
                twice_u,
                positives: pos_total,
                negatives: neg_below,
            }
            .value(),
        )
    }
}

/// Cumulative (false positives, true positives) after each distinct score,
/// scanning from the highest score down.
fn descending_cuts(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut cuts = Vec::new();
    let (mut fp, mut tp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        cuts.push((fp, tp));
    }
    cuts
}

/// ROC curve as (fpr, tpr) points from (0, 0) to (1, 1), one per distinct score.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_scored(scores, labels)?;
    let mut pts = vec![(0.0, 0.0)];
    pts.extend(
        descending_cuts(scores, labels)
            .into_iter()
            .map(|(fp, tp)| (fp as f64 / neg as f64, tp as f64 / pos as f64)),
    );
    Ok(pts)
}

/// Precision-recall curve as (recall, precision), one point per distinct score.
pub fn pr_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (pos, _) = check_scored(scores, labels)?;
    Ok(descending_cuts(scores, labels)
        .into_iter()
        .map(|(fp, tp)| (tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64))
        .collect())
}

/// Trapezoidal area under a piecewise-linear curve.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub threshold: f64,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False when nothing was predicted positive; precision is then reported as 0.
    pub precision_defined: bool,
    pub confusion: ConfusionCounts,
}

pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: scores.len(),
        });
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
        threshold,
    };
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn classification_metrics(
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<ClassificationMetrics> {
    let c = confusion(scores, labels, threshold)?;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ClassificationMetrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f1,
        precision_defined: c.tp + c.fp > 0,
        confusion: c,
    })
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument("pearson needs at least 2 values".into()));
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ConstantVector);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 0.05, 0.10, ..., 0.95.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..=19).map(|k| f64::from(k) / 20.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub f1: f64,
}

/// Grid point maximizing F1; ties go to the lowest threshold.
pub fn optimize_threshold(scores: &[f64], labels: &[u8], grid: &[f64]) -> Result<ThresholdChoice> {
    check_scored(scores, labels)?;
    let mut best: Option<ThresholdChoice> = None;
    for &t in grid {
        let f1 = classification_metrics(scores, labels, t)?.f1;
        if best.is_none_or(|b| f1.partial_cmp(&b.f1) == Some(Ordering::Greater)) {
            best = Some(ThresholdChoice { threshold: t, f1 });
        }
    }
    best.ok_or(Error::EmptySpace)
}

/// Per-model optimal thresholds, in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub models: Vec<(String, ThresholdChoice)>,
}

pub fn write_curve_csv<W: Write>(
    writer: W,
    columns: (&str, &str),
    points: &[(f64, f64)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([columns.0, columns.1])?;
    for (a, b) in points {
        w.write_record([a.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
