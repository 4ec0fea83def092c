//! Stratified k-fold cross-validation and paired bootstrap tests on AUC.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{apply_scaler, fit_scaler, DataTable};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{classification_metrics, roc_auc, RankedScores};
use crate::par;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// Fold of each row.
    pub fold: Vec<usize>,
}

impl FoldAssignment {
    /// (training rows, held-out rows) of fold `f`, both ascending.
    pub fn partition(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (i, &g) in self.fold.iter().enumerate() {
            if g == f {
                held.push(i);
            } else {
                train.push(i);
            }
        }
        (train, held)
    }
}

/// Per-class shuffle, then round-robin over folds. The negative class starts
/// where the positive class stopped so total fold sizes also differ by at
/// most one.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidArgument("k must be >= 2".into()));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        by_class[usize::from(y == 1)].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < k {
            return Err(Error::TooFewPerClass {
                k,
                class: class as u8,
                count: members.len(),
            });
        }
    }
    let mut rng = seed::derived_rng(seed, "kfold", 0);
    let mut fold = vec![0; labels.len()];
    let start = [by_class[1].len() % k, 0];
    for class in [1, 0] {
        let members = &mut by_class[class];
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            fold[i] = (start[class] + j) % k;
        }
    }
    Ok(FoldAssignment { k, seed, fold })
}

/// Scaled training and held-out data handed to a model factory.
pub struct FoldData<'a> {
    pub index: usize,
    pub train_x: &'a Matrix,
    pub train_y: &'a [u8],
    pub test_x: &'a Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub fold_auc: Vec<f64>,
    /// F1 at threshold 0.5.
    pub fold_f1: Vec<f64>,
    pub mean_auc: f64,
    /// Sample standard deviation across folds.
    pub std_auc: f64,
    pub mean_f1: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Fits `factory` on each fold's training rows and scores its held-out rows.
/// The scaler is refit on the training rows of every fold.
pub fn cross_validate<F>(table: &DataTable, folds: &FoldAssignment, factory: F) -> Result<CvSummary>
where
    F: Fn(FoldData<'_>) -> Result<Vec<f64>> + Sync + Send,
{
    if folds.fold.len() != table.n_rows() {
        return Err(Error::DimensionMismatch {
            expected: table.n_rows(),
            found: folds.fold.len(),
        });
    }
    let results = par::map_range(folds.k, |f| -> Result<(f64, f64)> {
        let (train, held) = folds.partition(f);
        let scaler = fit_scaler(table, &train)?;
        let scaled = apply_scaler(table, &scaler)?;
        let train_x = scaled.values.select_rows(&train);
        let train_y: Vec<u8> = train.iter().map(|&i| table.target[i]).collect();
        let test_x = scaled.values.select_rows(&held);
        let test_y: Vec<u8> = held.iter().map(|&i| table.target[i]).collect();
        let scores = factory(FoldData {
            index: f,
            train_x: &train_x,
            train_y: &train_y,
            test_x: &test_x,
        })?;
        let auc = roc_auc(&scores, &test_y)?;
        let f1 = classification_metrics(&scores, &test_y, 0.5)?.f1;
        Ok((auc, f1))
    });
    let (fold_auc, fold_f1): (Vec<f64>, Vec<f64>) = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let (mean_auc, std_auc) = mean_std(&fold_auc);
    let (mean_f1, _) = mean_std(&fold_f1);
    Ok(CvSummary {
        fold_auc,
        fold_f1,
        mean_auc,
        std_auc,
        mean_f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub observed_delta_auc: f64,
    /// One-sided: evidence that model A ranks better than model B.
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub iterations: usize,
    pub seed: u64,
    pub sidedness: String,
    /// Per-resample `auc_a - auc_b`, in iteration order.
    #[serde(skip)]
    pub deltas: Vec<f64>,
}

/// Percentile interval endpoints from resample deltas: the order statistics
/// at `floor(0.025 B)` and `ceil(0.975 B) - 1`.
pub fn percentile_interval(deltas: &[f64]) -> (f64, f64) {
    let mut sorted = deltas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b = sorted.len();
    let lo = ((0.025 * b as f64).floor() as usize).min(b - 1);
    let hi = ((0.975 * b as f64).ceil() as usize).saturating_sub(1).min(b - 1);
    (sorted[lo], sorted[hi])
}

/// Paired bootstrap of `AUC(a) - AUC(b)` over `iterations` row resamples.
///
/// Resamples lacking a class are redrawn, so exactly `iterations` deltas are
/// kept. `p = (1 + #{delta <= 0}) / (iterations + 1)`.
pub fn paired_bootstrap_auc(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[u8],
    iterations: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if scores_a.len() != labels.len() || scores_b.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            found: scores_a.len().min(scores_b.len()),
        });
    }
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    let observed_delta_auc = roc_auc(scores_a, labels)? - roc_auc(scores_b, labels)?;
    let rank_a = RankedScores::new(scores_a)?;
    let rank_b = RankedScores::new(scores_b)?;
    let n = labels.len();
    let deltas = par::map_range(iterations, |b| {
        let mut rng = seed::derived_rng(seed, "bootstrap", b as u64);
        let mut counts = vec![0u32; n];
        loop {
            counts.iter_mut().for_each(|c| *c = 0);
            for _ in 0..n {
                counts[rng.random_range(0..n)] += 1;
            }
            if let (Some(a), Some(b)) = (
                rank_a.auc_with_counts(labels, &counts),
                rank_b.auc_with_counts(labels, &counts),
            ) {
                return a - b;
            }
        }
    });
    let not_better = deltas.iter().filter(|&&d| d <= 0.0).count();
    let p_value = (1 + not_better) as f64 / (iterations + 1) as f64;
    let (ci_low, ci_high) = percentile_interval(&deltas);
    Ok(BootstrapResult {
        observed_delta_auc,
        p_value,
        ci_low,
        ci_high,
        iterations,
        seed,
        sidedness: "one-sided: auc_a > auc_b".into(),
        deltas,
    })
}

pub fn write_delta_log<W: Write>(writer: W, result: &BootstrapResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iteration", "delta_auc"])?;
    for (i, d) in result.deltas.iter().enumerate() {
        w.write_record([i.to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, FeatureSchema};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn balanced_folds() {
        let labels = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let f = stratified_kfold(&labels, 5, 3).unwrap();
        for fold in 0..5 {
            let (_, held) = f.partition(fold);
            let pos = held.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!((held.len(), pos), (2, 1));
        }
        assert!(matches!(
            stratified_kfold(&labels, 6, 3),
            Err(Error::TooFewPerClass { k: 6, .. })
        ));
        assert_eq!(stratified_kfold(&labels, 5, 3).unwrap(), f);
    }

    #[test]
    fn fold_counts_103_897() {
        let mut labels = vec![1u8; 103];
        labels.extend(vec![0u8; 897]);
        let f = stratified_kfold(&labels, 5, 0).unwrap();
        for fold in 0..5 {
            let (_, held) = f.partition(fold);
            let pos = held.iter().filter(|&&i| labels[i] == 1).count();
            assert!(pos == 20 || pos == 21);
            assert_eq!(held.len(), 200);
        }
    }

    proptest! {
        #[test]
        fn folds_stratified(labels in prop::collection::vec(0u8..2, 10..300), k in 2usize..8, seed in 0u64..1000) {
            let pos = labels.iter().filter(|&&y| y == 1).count();
            let neg = labels.len() - pos;
            prop_assume!(pos >= k && neg >= k);
            let f = stratified_kfold(&labels, k, seed).unwrap();
            for fold in 0..k {
                let (_, held) = f.partition(fold);
                let p = held.iter().filter(|&&i| labels[i] == 1).count();
                let n = held.len() - p;
                prop_assert!(p == pos / k || p == pos.div_ceil(k));
                prop_assert!(n == neg / k || n == neg.div_ceil(k));
            }
        }
    }

    #[test]
    fn constant_factory_gives_half() {
        let table = generate_synthetic(500, 0.2, 1).unwrap();
        let folds = stratified_kfold(&table.target, 5, 2).unwrap();
        let cv = cross_validate(&table, &folds, |d| Ok(vec![0.3; d.test_x.n_rows()])).unwrap();
        assert_eq!(cv.fold_auc, vec![0.5; 5]);
        assert_eq!(cv.std_auc, 0.0);
    }

    #[test]
    fn nearest_neighbour_on_separable() {
        let schema = FeatureSchema::default();
        let mut table = generate_synthetic(300, 0.3, 4).unwrap();
        // make the first column carry the label exactly
        for i in 0..table.n_rows() {
            let v = f64::from(table.target[i]) * 10.0 + (i % 7) as f64 * 0.1;
            table.values.set(i, 0, v);
        }
        assert_eq!(table.schema.len(), schema.len());
        let folds = stratified_kfold(&table.target, 5, 0).unwrap();
        let cv = cross_validate(&table, &folds, |d| {
            Ok(d.test_x
                .rows()
                .map(|q| {
                    let nearest = d
                        .train_x
                        .rows()
                        .enumerate()
                        .min_by(|a, b| (a.1[0] - q[0]).abs().total_cmp(&(b.1[0] - q[0]).abs()))
                        .unwrap()
                        .0;
                    f64::from(d.train_y[nearest])
                })
                .collect())
        })
        .unwrap();
        assert_eq!(cv.mean_auc, 1.0);
    }

    #[test]
    fn identical_scores_p_is_one() {
        let mut rng = seed::rng(1);
        let labels: Vec<u8> = (0..400).map(|i| u8::from(i % 5 == 0)).collect();
        let s: Vec<f64> = (0..400).map(|_| rng.random::<f64>()).collect();
        let r = paired_bootstrap_auc(&s, &s, &labels, 200, 7).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!((r.ci_low, r.ci_high, r.observed_delta_auc), (0.0, 0.0, 0.0));
        let mut log = Vec::new();
        write_delta_log(&mut log, &r).unwrap();
        assert_eq!(String::from_utf8(log).unwrap().lines().count(), 201);
    }

    #[test]
    fn constructed_effect_detected() {
        let mut rng = seed::rng(2);
        let n = 2000;
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.2)).collect();
        let base: Vec<f64> = labels.iter().map(|&y| f64::from(y) * 0.9 + rng.random::<f64>() * 1.5).collect();
        let better: Vec<f64> = base.iter().zip(&labels).map(|(s, &y)| s + f64::from(y) * 0.4).collect();
        let r = paired_bootstrap_auc(&better, &base, &labels, 300, 3).unwrap();
        assert!(r.observed_delta_auc > 0.0);
        assert!(r.p_value < 0.05);
        assert!(r.ci_low <= r.observed_delta_auc && r.observed_delta_auc <= r.ci_high);
        assert_eq!(percentile_interval(&r.deltas), (r.ci_low, r.ci_high));
        assert!(r.p_value >= 1.0 / 301.0);
    }
}
