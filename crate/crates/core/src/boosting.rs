//! Second-order gradient boosting for the logistic loss.
//!
//! Depthwise growth plays the role of the level-wise booster, leafwise
//! growth with a leaf budget the role of the leaf-wise one; otherwise both
//! share one learner. `margin(x) = init_score + sum_k learning_rate * tree_k(x)`.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::baselines::{sigmoid, softplus};
use crate::dataset::{compute_class_weights, stratified_subsample};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::roc_auc;
use crate::par;
use crate::seed;
use crate::trees::{self, DecisionTree, FeatureIndex, GrowOptions, Growth, SplitConfig};

const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePosWeight {
    /// negatives / positives of the fitting rows
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbmConfig {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub growth: Growth,
    /// Depth of depthwise trees; an additional cap for leafwise ones.
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub subsample: f64,
    pub reg_alpha: f64,
    pub reg_lambda: f64,
    pub scale_pos_weight: ScalePosWeight,
    pub seed: u64,
}

impl Default for GbmConfig {
    fn default() -> Self {
        Self {
            n_estimators: 100,
            learning_rate: 0.1,
            growth: Growth::Depthwise,
            max_depth: 3,
            min_samples_leaf: 1,
            subsample: 1.0,
            reg_alpha: 0.0,
            reg_lambda: 1.0,
            scale_pos_weight: ScalePosWeight::Auto,
            seed: 0,
        }
    }
}

impl GbmConfig {
    /// Level-wise booster with L1 leaf regularization.
    pub fn depthwise_role(seed: u64) -> Self {
        Self {
            subsample: 0.8,
            reg_alpha: 0.1,
            seed,
            ..Self::default()
        }
    }

    /// Leaf-wise booster with a 31-leaf budget.
    pub fn leafwise_role(seed: u64) -> Self {
        Self {
            growth: Growth::Leafwise { num_leaves: 31 },
            subsample: 0.8,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must lie in (0, 1]");
        }
        if !(self.reg_alpha >= 0.0 && self.reg_lambda >= 0.0) {
            return bad("regularization must be >= 0");
        }
        match self.growth {
            Growth::Depthwise if self.max_depth == 0 => return bad("max_depth must be >= 1"),
            Growth::Leafwise { num_leaves } if num_leaves < 2 => {
                return bad("num_leaves must be >= 2")
            }
            _ => {}
        }
        if let ScalePosWeight::Fixed(w) = self.scale_pos_weight {
            if !(w > 0.0 && w.is_finite()) {
                return bad("scale_pos_weight must be > 0");
            }
        }
        Ok(())
    }

    fn split_config(&self) -> SplitConfig {
        SplitConfig {
            max_depth: self.max_depth,
            min_samples_split: 2 * self.min_samples_leaf.max(1),
            min_samples_leaf: self.min_samples_leaf.max(1),
            min_gain: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedModel {
    pub config: GbmConfig,
    pub init_score: f64,
    /// Resolved positive-class weight used during fitting.
    pub scale_pos_weight: f64,
    pub feature_count: usize,
    pub trees: Vec<DecisionTree>,
}

impl BoostedModel {
    pub fn predict_margin(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.feature_count {
            return Err(Error::DimensionMismatch {
                expected: self.feature_count,
                found: x.len(),
            });
        }
        Ok(self.margin_unchecked(x))
    }

    pub fn margin_unchecked(&self, x: &[f64]) -> f64 {
        let lr = self.config.learning_rate;
        let mut m = self.init_score;
        for t in &self.trees {
            m += lr * t.predict_unchecked(x);
        }
        m
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.predict_margin(x)?))
    }

    pub fn margin_matrix(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.n_cols() != self.feature_count {
            return Err(Error::DimensionMismatch {
                expected: self.feature_count,
                found: x.n_cols(),
            });
        }
        Ok(par::map_range(x.n_rows(), |i| self.margin_unchecked(x.row(i))))
    }

    pub fn predict_matrix(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.margin_matrix(x)?.into_iter().map(sigmoid).collect())
    }

    /// The first `n` rounds as a model of their own.
    pub fn truncated(&self, n: usize) -> Self {
        let mut m = self.clone();
        m.trees.truncate(n);
        m.config.n_estimators = m.trees.len();
        m
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        for t in &model.trees {
            t.validate()?;
            if t.feature_count != model.feature_count {
                return Err(Error::DimensionMismatch {
                    expected: model.feature_count,
                    found: t.feature_count,
                });
            }
        }
        Ok(model)
    }
}

/// Weighted mean log-loss of margins.
pub fn weighted_log_loss(margins: &[f64], y: &[u8], w_pos: f64) -> f64 {
    let mut loss = 0.0;
    let mut total = 0.0;
    for (&m, &label) in margins.iter().zip(y) {
        let w = if label == 1 { w_pos } else { 1.0 };
        loss += w * (softplus(m) - f64::from(label) * m);
        total += w;
    }
    loss / total
}

fn resolve_weight(config: &GbmConfig, y: &[u8]) -> Result<f64> {
    Ok(match config.scale_pos_weight {
        ScalePosWeight::Fixed(w) => w,
        ScalePosWeight::Auto => {
            let all: Vec<usize> = (0..y.len()).collect();
            compute_class_weights(y, &all)?.w_pos
        }
    })
}

fn check_xy(x: &Matrix, y: &[u8]) -> Result<()> {
    if x.n_rows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.n_rows(),
            found: y.len(),
        });
    }
    if let Some(i) = y.iter().position(|&v| v > 1) {
        return Err(Error::TargetNotBinary { row: i + 1 });
    }
    let pos = y.iter().filter(|&&v| v == 1).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::SingleClass);
    }
    Ok(())
}

/// Fits a boosted model, calling `on_round(k, &tree)` after each round.
fn fit_inner(
    x: &Matrix,
    y: &[u8],
    config: &GbmConfig,
    mut on_round: impl FnMut(usize, &DecisionTree, &[f64]),
) -> Result<BoostedModel> {
    config.validate()?;
    check_xy(x, y)?;
    let w_pos = resolve_weight(config, y)?;
    let n = x.n_rows();
    let weight = |label: u8| if label == 1 { w_pos } else { 1.0 };
    let (mut wy, mut wt) = (0.0, 0.0);
    for &label in y {
        wy += weight(label) * f64::from(label);
        wt += weight(label);
    }
    let base = wy / wt;
    let init_score = (base / (1.0 - base)).ln();
    if !init_score.is_finite() {
        return Err(Error::NonFinite("initial score".into()));
    }

    let index = FeatureIndex::new(x)?;
    let split = config.split_config();
    let mut margins = vec![init_score; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut trees_out = Vec::with_capacity(config.n_estimators);
    let n_sub = ((config.subsample * n as f64).round() as usize).clamp(1, n);
    let all_rows: Vec<usize> = (0..n).collect();

    for round in 0..config.n_estimators {
        for (i, &label) in y.iter().enumerate() {
            let p = sigmoid(margins[i]);
            let w = weight(label);
            grad[i] = w * (p - f64::from(label));
            hess[i] = w * p * (1.0 - p);
        }
        let sub;
        let rows: &[usize] = if n_sub < n {
            let mut rng = seed::derived_rng(config.seed, "gbm-subsample", round as u64);
            let mut s = sample(&mut rng, n, n_sub).into_vec();
            s.sort_unstable();
            sub = s;
            &sub
        } else {
            &all_rows
        };
        let opts = GrowOptions {
            growth: config.growth,
            max_features: None,
            seed: 0,
        };
        let tree = trees::grow_regression(
            &index,
            rows,
            &grad,
            &hess,
            config.reg_lambda,
            config.reg_alpha,
            &split,
            &opts,
        )?;
        let lr = config.learning_rate;
        par::for_each_chunk_mut(&mut margins, CHUNK, |c, chunk| {
            for (k, m) in chunk.iter_mut().enumerate() {
                *m += lr * tree.predict_unchecked(x.row(c * CHUNK + k));
            }
        });
        if margins.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite(format!("margins after round {round}")));
        }
        on_round(round, &tree, &margins);
        trees_out.push(tree);
    }
    Ok(BoostedModel {
        config: *config,
        init_score,
        scale_pos_weight: w_pos,
        feature_count: x.n_cols(),
        trees: trees_out,
    })
}

pub fn fit_gbm(x: &Matrix, y: &[u8], config: &GbmConfig) -> Result<BoostedModel> {
    fit_inner(x, y, config, |_, _, _| {})
}

/// Like [`fit_gbm`], also returning the weighted training log-loss before
/// the first round and after every round.
pub fn fit_gbm_with_history(
    x: &Matrix,
    y: &[u8],
    config: &GbmConfig,
) -> Result<(BoostedModel, Vec<f64>)> {
    let w_pos = resolve_weight(config, y).unwrap_or(1.0);
    let mut history = Vec::new();
    let model = fit_inner(x, y, config, |_, _, margins| {
        history.push(weighted_log_loss(margins, y, w_pos));
    })?;
    let init = vec![model.init_score; y.len()];
    history.insert(0, weighted_log_loss(&init, y, w_pos));
    Ok((model, history))
}

/// A hyperparameter setting that can be ranked when scores tie.
pub trait Tunable: Clone + Send + Sync {
    /// Smaller is preferred: (estimators, depth, learning rate).
    fn tie_key(&self) -> (usize, usize, f64);
}

impl Tunable for GbmConfig {
    fn tie_key(&self) -> (usize, usize, f64) {
        (self.n_estimators, self.max_depth, self.learning_rate)
    }
}

impl Tunable for crate::baselines::ForestConfig {
    fn tie_key(&self) -> (usize, usize, f64) {
        (self.n_estimators, self.split.max_depth, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult<C> {
    pub best: C,
    pub best_score: f64,
    /// Every evaluated setting with its validation AUC, in space order.
    pub scores: Vec<(C, f64)>,
}

/// Highest score; ties prefer fewer estimators, then shallower trees, then
/// a lower learning rate, then the earlier entry.
pub fn select_best<C: Tunable>(scores: Vec<(C, f64)>) -> Result<SearchResult<C>> {
    let mut best: Option<usize> = None;
    for (i, (c, s)) in scores.iter().enumerate() {
        if s.is_nan() {
            return Err(Error::NonFinite("search score".into()));
        }
        let better = match best {
            None => true,
            Some(j) => {
                let (bc, bs) = &scores[j];
                *s > *bs || (*s == *bs && c.tie_key().partial_cmp(&bc.tie_key()) == Some(std::cmp::Ordering::Less))
            }
        };
        if better {
            best = Some(i);
        }
    }
    let i = best.ok_or(Error::EmptySpace)?;
    Ok(SearchResult {
        best: scores[i].0.clone(),
        best_score: scores[i].1,
        scores,
    })
}

/// Scores every setting (in parallel) with `score` and selects the best.
pub fn grid_search<C, F>(space: &[C], score: F) -> Result<SearchResult<C>>
where
    C: Tunable,
    F: Fn(&C) -> Result<f64> + Sync + Send,
{
    if space.is_empty() {
        return Err(Error::EmptySpace);
    }
    let scores = par::map_slice(space, |c| score(c).map(|s| (c.clone(), s)));
    select_best(scores.into_iter().collect::<Result<_>>()?)
}

/// Cross-product search space over a base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmSpace {
    pub n_estimators: Vec<usize>,
    pub max_depth: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub reg_alpha: Vec<f64>,
}

impl GbmSpace {
    /// 2 x 2 x 2 x 2 space for the level-wise booster.
    pub fn depthwise_role() -> Self {
        Self {
            n_estimators: vec![100, 200],
            max_depth: vec![3, 5],
            learning_rate: vec![0.05, 0.1],
            reg_alpha: vec![0.1, 1.0],
        }
    }

    /// 2 x 2 x 2 space for the leaf-wise booster (no L1 term).
    pub fn leafwise_role() -> Self {
        Self {
            reg_alpha: vec![0.0],
            ..Self::depthwise_role()
        }
    }

    /// Settings in order: estimators, depth, learning rate, alpha (innermost).
    pub fn configs(&self, base: &GbmConfig) -> Vec<GbmConfig> {
        let mut out = Vec::new();
        for &n in &self.n_estimators {
            for &d in &self.max_depth {
                for &lr in &self.learning_rate {
                    for &a in &self.reg_alpha {
                        out.push(GbmConfig {
                            n_estimators: n,
                            max_depth: d,
                            learning_rate: lr,
                            reg_alpha: a,
                            ..*base
                        });
                    }
                }
            }
        }
        out
    }
}

/// Grid search for boosted models scored by validation AUC.
///
/// Settings that differ only in `n_estimators` share one fit: the first `n`
/// rounds of a longer run are exactly the `n`-round model, because every
/// round's row draw depends only on the seed and the round index.
/// `max_train_rows` optionally fits on a stratified subsample.
pub fn search_gbm(
    space: &[GbmConfig],
    train: (&Matrix, &[u8]),
    val: (&Matrix, &[u8]),
    max_train_rows: Option<usize>,
    seed: u64,
) -> Result<SearchResult<GbmConfig>> {
    if space.is_empty() {
        return Err(Error::EmptySpace);
    }
    let (x, y) = train;
    let sub_x;
    let sub_y: Vec<u8>;
    let (x, y) = match max_train_rows {
        Some(m) if m < y.len() => {
            let rows = stratified_subsample(y, m, seed);
            sub_x = x.select_rows(&rows);
            sub_y = rows.iter().map(|&r| y[r]).collect();
            (&sub_x, &sub_y[..])
        }
        _ => (x, y),
    };
    // group settings that only differ in round count
    let mut groups: Vec<(GbmConfig, Vec<usize>)> = Vec::new();
    for (i, c) in space.iter().enumerate() {
        let key = GbmConfig { n_estimators: 0, ..*c };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    let (vx, vy) = val;
    let group_scores = par::map_slice(&groups, |(key, members)| -> Result<Vec<(usize, f64)>> {
        let longest = members.iter().map(|&i| space[i].n_estimators).max().unwrap_or(0);
        let model = fit_gbm(x, y, &GbmConfig { n_estimators: longest, ..*key })?;
        let mut margins = vec![model.init_score; vx.n_rows()];
        let mut order: Vec<usize> = members.clone();
        order.sort_by_key(|&i| space[i].n_estimators);
        let mut out = Vec::new();
        let mut done = 0;
        for &i in &order {
            let target = space[i].n_estimators;
            for t in &model.trees[done..target] {
                for (m, row) in margins.iter_mut().zip(vx.rows()) {
                    *m += key.learning_rate * t.predict_unchecked(row);
                }
            }
            done = target;
            let probs: Vec<f64> = margins.iter().map(|&m| sigmoid(m)).collect();
            out.push((i, roc_auc(&probs, vy)?));
        }
        Ok(out)
    });
    let mut scores = vec![0.0; space.len()];
    for g in group_scores {
        for (i, s) in g? {
            scores[i] = s;
        }
    }
    select_best(space.iter().copied().zip(scores).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn signal(rng: &mut seed::Rng, n: usize, pos_rate: f64) -> (Matrix, Vec<u8>) {
        let mut data = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let r: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let z = 3.0 * r[0] + 2.0 * (r[1] > 0.5) as u8 as f64 * r[2] - 2.5 + (pos_rate - 0.5) * 4.0;
            y.push(u8::from(rng.random::<f64>() < sigmoid(z)));
            data.extend(r);
        }
        (Matrix::new(n, 4, data).unwrap(), y)
    }

    #[test]
    fn zero_rounds_predict_weighted_prevalence() {
        let mut rng = seed::rng(1);
        let (x, y) = signal(&mut rng, 200, 0.3);
        let config = GbmConfig {
            n_estimators: 0,
            scale_pos_weight: ScalePosWeight::Fixed(1.0),
            ..GbmConfig::default()
        };
        let m = fit_gbm(&x, &y, &config).unwrap();
        let prev = y.iter().filter(|&&v| v == 1).count() as f64 / 200.0;
        assert!((m.predict_proba(x.row(0)).unwrap() - prev).abs() < 1e-12);
        let auto = fit_gbm(&x, &y, &GbmConfig { n_estimators: 0, ..GbmConfig::default() }).unwrap();
        assert!(auto.init_score.abs() < 1e-12);
    }

    #[test]
    fn first_round_newton_step() {
        // 4 rows, one feature; init = logit(1/2) = 0, so p = 1/2 everywhere
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let y = [0, 1, 1, 1];
        let config = GbmConfig {
            n_estimators: 1,
            learning_rate: 1.0,
            max_depth: 1,
            reg_lambda: 0.0,
            reg_alpha: 0.0,
            subsample: 1.0,
            scale_pos_weight: ScalePosWeight::Fixed(1.0 / 3.0),
            ..GbmConfig::default()
        };
        let m = fit_gbm(&x, &y, &config).unwrap();
        assert!(m.init_score.abs() < 1e-15);
        // g = w(p - y): row0 = 0.5, rows1-3 = -1/6; h = w/4: 0.25, 1/12 each.
        // Best split isolates row 0: left -0.5/0.25 = -2, right (1/2)/(1/4) = 2.
        assert!((m.trees[0].predict(&[0.0]).unwrap() + 2.0).abs() < 1e-12);
        assert!((m.trees[0].predict(&[3.0]).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn training_loss_non_increasing() {
        let mut rng = seed::rng(2);
        let (x, y) = signal(&mut rng, 1000, 0.2);
        let config = GbmConfig {
            n_estimators: 50,
            subsample: 1.0,
            ..GbmConfig::leafwise_role(3)
        };
        let (_, history) = fit_gbm_with_history(&x, &y, &config).unwrap();
        assert_eq!(history.len(), 51);
        for w in history.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn unit_weight_matches_unweighted() {
        let mut rng = seed::rng(3);
        let (x, y) = signal(&mut rng, 400, 0.5);
        let a = fit_gbm(&x, &y, &GbmConfig { scale_pos_weight: ScalePosWeight::Fixed(1.0), ..GbmConfig::depthwise_role(1) }).unwrap();
        let b = fit_gbm(&x, &y, &GbmConfig { scale_pos_weight: ScalePosWeight::Fixed(1.0), ..GbmConfig::depthwise_role(1) }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn proba_matches_tree_sum_and_round_trips() {
        let mut rng = seed::rng(4);
        let (x, y) = signal(&mut rng, 500, 0.3);
        let m = fit_gbm(&x, &y, &GbmConfig { n_estimators: 30, ..GbmConfig::leafwise_role(7) }).unwrap();
        for _ in 0..100 {
            let q: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let mut walk = m.init_score;
            for t in &m.trees {
                walk += m.config.learning_rate * t.predict(&q).unwrap();
            }
            assert!((m.predict_proba(&q).unwrap() - 1.0 / (1.0 + (-walk).exp())).abs() < 1e-12);
        }
        let back = BoostedModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.predict_matrix(&x).unwrap(), m.predict_matrix(&x).unwrap());
    }

    #[test]
    fn prefix_equals_shorter_fit() {
        let mut rng = seed::rng(5);
        let (x, y) = signal(&mut rng, 300, 0.3);
        let long = fit_gbm(&x, &y, &GbmConfig { n_estimators: 20, ..GbmConfig::depthwise_role(2) }).unwrap();
        let short = fit_gbm(&x, &y, &GbmConfig { n_estimators: 8, ..GbmConfig::depthwise_role(2) }).unwrap();
        assert_eq!(long.truncated(8), short);
    }

    #[test]
    fn leafwise_not_worse_than_depthwise() {
        let mut rng = seed::rng(6);
        let (x, y) = signal(&mut rng, 300, 0.4);
        let base = GbmConfig { n_estimators: 5, subsample: 1.0, ..GbmConfig::default() };
        let depth = fit_gbm_with_history(&x, &y, &GbmConfig { n_estimators: 1, max_depth: 2, ..base }).unwrap().1;
        let leaf = fit_gbm_with_history(
            &x,
            &y,
            &GbmConfig { n_estimators: 1, max_depth: usize::MAX, growth: Growth::Leafwise { num_leaves: 4 }, ..base },
        )
        .unwrap()
        .1;
        assert!(leaf[1] <= depth[1] + 1e-12);
    }

    #[test]
    fn search_rescoring_and_ties() {
        let mut rng = seed::rng(7);
        let (x, y) = signal(&mut rng, 600, 0.3);
        let (vx, vy) = signal(&mut rng, 300, 0.3);
        let space = GbmSpace {
            n_estimators: vec![5, 10],
            max_depth: vec![2, 3],
            learning_rate: vec![0.1],
            reg_alpha: vec![0.1, 1.0],
        }
        .configs(&GbmConfig::depthwise_role(11));
        assert_eq!(space.len(), 8);
        let result = search_gbm(&space, (&x, &y), (&vx, &vy), None, 0).unwrap();
        for (c, s) in &result.scores {
            let m = fit_gbm(&x, &y, c).unwrap();
            assert_eq!(*s, roc_auc(&m.predict_matrix(&vx).unwrap(), &vy).unwrap());
        }
        assert!(result.scores.iter().all(|(_, s)| *s <= result.best_score));

        let a = GbmConfig { n_estimators: 200, ..GbmConfig::default() };
        let b = GbmConfig { n_estimators: 100, ..GbmConfig::default() };
        let tie = select_best(vec![(a, 0.8), (b, 0.8)]).unwrap();
        assert_eq!(tie.best.n_estimators, 100);
        let strict = select_best(vec![(a, 0.81), (b, 0.8)]).unwrap();
        assert_eq!(strict.best.n_estimators, 200);
        assert!(matches!(select_best::<GbmConfig>(vec![]), Err(Error::EmptySpace)));
        let single = grid_search(&[b], |_| Ok(0.5)).unwrap();
        assert_eq!(single.best, b);
    }
}
