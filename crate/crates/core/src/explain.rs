//! Shapley attributions for tree models and surrogate-tree distillation.
//!
//! Attributions use the path-dependent formulation: a feature absent from a
//! coalition is marginalized by following both children of each split on it,
//! weighted by the children's training covers.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::baselines::sigmoid;
use crate::boosting::BoostedModel;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par;
use crate::trees::{extract_paths, fit_classification_tree, DecisionTree, Node, RulePath, SplitConfig};

pub const MAX_BRUTE_FORCE_FEATURES: usize = 15;
pub const SURROGATE_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Margin,
    Probability,
}

/// A sum of scaled trees plus an offset.
pub trait TreeModel: Sync {
    fn feature_count(&self) -> usize;
    fn offset(&self) -> f64;
    fn scaled_trees(&self) -> Vec<(&DecisionTree, f64)>;
    fn output(&self, x: &[f64]) -> f64;
    fn space(&self) -> Space;
}

impl TreeModel for BoostedModel {
    fn feature_count(&self) -> usize {
        self.feature_count
    }

    fn offset(&self) -> f64 {
        self.init_score
    }

    fn scaled_trees(&self) -> Vec<(&DecisionTree, f64)> {
        self.trees.iter().map(|t| (t, self.config.learning_rate)).collect()
    }

    fn output(&self, x: &[f64]) -> f64 {
        self.margin_unchecked(x)
    }

    fn space(&self) -> Space {
        Space::Margin
    }
}

impl TreeModel for DecisionTree {
    fn feature_count(&self) -> usize {
        self.feature_count
    }

    fn offset(&self) -> f64 {
        0.0
    }

    fn scaled_trees(&self) -> Vec<(&DecisionTree, f64)> {
        vec![(self, 1.0)]
    }

    fn output(&self, x: &[f64]) -> f64 {
        self.predict_unchecked(x)
    }

    fn space(&self) -> Space {
        match self.kind {
            crate::trees::TreeKind::Classification => Space::Probability,
            crate::trees::TreeKind::Regression => Space::Margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapExplanation {
    pub base_value: f64,
    pub contributions: Vec<f64>,
    pub model_output: f64,
    pub space: Space,
}

impl ShapExplanation {
    /// `base + sum(contributions) - output`.
    pub fn additivity_error(&self) -> f64 {
        self.base_value + self.contributions.iter().sum::<f64>() - self.model_output
    }
}

fn check_covers(tree: &DecisionTree) -> Result<()> {
    for (i, n) in tree.nodes.iter().enumerate() {
        if !(n.cover() > 0.0 && n.cover().is_finite()) {
            return Err(Error::MissingCovers { node: i });
        }
    }
    Ok(())
}

fn check_model<M: TreeModel + ?Sized>(model: &M, x: &[f64]) -> Result<()> {
    if x.len() != model.feature_count() {
        return Err(Error::DimensionMismatch {
            expected: model.feature_count(),
            found: x.len(),
        });
    }
    for (t, _) in model.scaled_trees() {
        check_covers(t)?;
    }
    Ok(())
}

/// Cover-weighted mean of the tree output with every feature marginalized.
pub fn expected_value(tree: &DecisionTree) -> f64 {
    conditional_value(tree, 0, &[], &|_| false)
}

fn conditional_value(tree: &DecisionTree, at: usize, x: &[f64], known: &dyn Fn(usize) -> bool) -> f64 {
    match tree.nodes[at] {
        Node::Leaf { value, .. } => value,
        Node::Internal {
            feature,
            threshold,
            left,
            right,
            cover,
            ..
        } => {
            if known(feature) {
                let next = if x[feature] <= threshold { left } else { right };
                conditional_value(tree, next, x, known)
            } else {
                let l = tree.nodes[left].cover() / cover;
                let r = tree.nodes[right].cover() / cover;
                l * conditional_value(tree, left, x, known) + r * conditional_value(tree, right, x, known)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: usize,
    zero: f64,
    one: f64,
    weight: f64,
}

const NO_FEATURE: usize = usize::MAX;

fn extend(path: &mut Vec<PathElement>, zero: f64, one: f64, feature: usize) {
    let l = path.len();
    path.push(PathElement {
        feature,
        zero,
        one,
        weight: if l == 0 { 1.0 } else { 0.0 },
    });
    let denom = (l + 1) as f64;
    for i in (0..l).rev() {
        path[i + 1].weight += one * path[i].weight * (i + 1) as f64 / denom;
        path[i].weight = zero * path[i].weight * (l - i) as f64 / denom;
    }
}

fn unwind(path: &mut Vec<PathElement>, k: usize) {
    let depth = path.len() - 1;
    let PathElement { zero, one, .. } = path[k];
    let denom = (depth + 1) as f64;
    let mut next = path[depth].weight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next * denom / ((i + 1) as f64 * one);
            next = tmp - path[i].weight * zero * (depth - i) as f64 / denom;
        } else {
            path[i].weight = path[i].weight * denom / (zero * (depth - i) as f64);
        }
    }
    for i in k..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero = path[i + 1].zero;
        path[i].one = path[i + 1].one;
    }
    path.pop();
}

/// Total weight of `path` with element `k` unwound, without modifying it.
fn unwound_sum(path: &[PathElement], k: usize) -> f64 {
    let depth = path.len() - 1;
    let PathElement { zero, one, .. } = path[k];
    let denom = (depth + 1) as f64;
    let mut total = 0.0;
    if one != 0.0 {
        let mut next = path[depth].weight;
        for i in (0..depth).rev() {
            let tmp = next * denom / ((i + 1) as f64 * one);
            total += tmp;
            next = path[i].weight - tmp * zero * (depth - i) as f64 / denom;
        }
    } else {
        for i in (0..depth).rev() {
            total += path[i].weight * denom / (zero * (depth - i) as f64);
        }
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    tree: &DecisionTree,
    x: &[f64],
    phi: &mut [f64],
    scale: f64,
    at: usize,
    mut path: Vec<PathElement>,
    zero: f64,
    one: f64,
    feature: usize,
) {
    extend(&mut path, zero, one, feature);
    match tree.nodes[at] {
        Node::Leaf { value, .. } => {
            for i in 1..path.len() {
                let w = unwound_sum(&path, i);
                let e = path[i];
                phi[e.feature] += w * (e.one - e.zero) * value * scale;
            }
        }
        Node::Internal {
            feature: split,
            threshold,
            left,
            right,
            cover,
            ..
        } => {
            let (hot, cold) = if x[split] <= threshold { (left, right) } else { (right, left) };
            let (mut inc_zero, mut inc_one) = (1.0, 1.0);
            if let Some(k) = path.iter().position(|e| e.feature == split) {
                inc_zero = path[k].zero;
                inc_one = path[k].one;
                unwind(&mut path, k);
            }
            let hot_frac = tree.nodes[hot].cover() / cover;
            let cold_frac = tree.nodes[cold].cover() / cover;
            recurse(tree, x, phi, scale, hot, path.clone(), hot_frac * inc_zero, inc_one, split);
            recurse(tree, x, phi, scale, cold, path, cold_frac * inc_zero, 0.0, split);
        }
    }
}

/// Adds `scale` times the tree's attributions for `x` into `phi`.
fn tree_shap_into(tree: &DecisionTree, x: &[f64], scale: f64, phi: &mut [f64]) {
    let path = Vec::with_capacity(tree.depth() + 2);
    recurse(tree, x, phi, scale, 0, path, 1.0, 1.0, NO_FEATURE);
}

/// Exact path-dependent Shapley values of `x`, summed over the model's trees.
pub fn treeshap<M: TreeModel + ?Sized>(model: &M, x: &[f64]) -> Result<ShapExplanation> {
    check_model(model, x)?;
    Ok(treeshap_unchecked(model, x))
}

fn treeshap_unchecked<M: TreeModel + ?Sized>(model: &M, x: &[f64]) -> ShapExplanation {
    let mut phi = vec![0.0; model.feature_count()];
    let mut base = model.offset();
    for (t, scale) in model.scaled_trees() {
        base += scale * expected_value(t);
        tree_shap_into(t, x, scale, &mut phi);
    }
    ShapExplanation {
        base_value: base,
        contributions: phi,
        model_output: model.output(x),
        space: model.space(),
    }
}

/// Shapley values by enumerating every feature coalition.
pub fn brute_force_shap<M: TreeModel + ?Sized>(model: &M, x: &[f64], max_features: usize) -> Result<ShapExplanation> {
    let d = model.feature_count();
    if d > max_features.min(MAX_BRUTE_FORCE_FEATURES) {
        return Err(Error::TooManyFeatures {
            features: d,
            max: max_features.min(MAX_BRUTE_FORCE_FEATURES),
        });
    }
    check_model(model, x)?;
    let trees = model.scaled_trees();
    let value = |mask: usize| -> f64 {
        let known = |f: usize| mask & (1 << f) != 0;
        let mut v = model.offset();
        for (t, scale) in &trees {
            v += scale * conditional_value(t, 0, x, &known);
        }
        v
    };
    let values: Vec<f64> = (0..1usize << d).map(value).collect();
    // |S|! (d - |S| - 1)! / d!
    let mut fact = vec![1.0f64; d + 1];
    for i in 1..=d {
        fact[i] = fact[i - 1] * i as f64;
    }
    let mut phi = vec![0.0; d];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1 << i;
        for mask in 0..1usize << d {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let w = fact[s] * fact[d - s - 1] / fact[d];
            *p += w * (values[mask | bit] - values[mask]);
        }
    }
    Ok(ShapExplanation {
        base_value: values[0],
        contributions: phi,
        model_output: model.output(x),
        space: model.space(),
    })
}

/// Explanations for every row of `x`, in row order.
pub fn explain_rows<M: TreeModel + ?Sized>(model: &M, x: &Matrix) -> Result<Vec<ShapExplanation>> {
    if x.n_cols() != model.feature_count() {
        return Err(Error::DimensionMismatch {
            expected: model.feature_count(),
            found: x.n_cols(),
        });
    }
    for (t, _) in model.scaled_trees() {
        check_covers(t)?;
    }
    Ok(par::map_range(x.n_rows(), |i| treeshap_unchecked(model, x.row(i))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalImportance {
    /// Mean |contribution| per feature, by feature index.
    pub mean_abs: Vec<f64>,
    /// Feature indices by decreasing importance; ties by index.
    pub ranking: Vec<usize>,
    pub sample_size: usize,
}

pub fn global_importance(explanations: &[ShapExplanation]) -> Result<GlobalImportance> {
    let first = explanations.first().ok_or(Error::EmptySample)?;
    let d = first.contributions.len();
    let mut mean_abs = vec![0.0; d];
    for e in explanations {
        for (m, c) in mean_abs.iter_mut().zip(&e.contributions) {
            *m += c.abs();
        }
    }
    let n = explanations.len() as f64;
    mean_abs.iter_mut().for_each(|m| *m /= n);
    let mut ranking: Vec<usize> = (0..d).collect();
    ranking.sort_by(|&a, &b| mean_abs[b].total_cmp(&mean_abs[a]).then(a.cmp(&b)));
    Ok(GlobalImportance {
        mean_abs,
        ranking,
        sample_size: explanations.len(),
    })
}

pub fn write_importance_csv<W: Write>(writer: W, importance: &GlobalImportance, names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["rank", "feature", "mean_abs_shap"])?;
    for (rank, &f) in importance.ranking.iter().enumerate() {
        w.write_record([(rank + 1).to_string(), feature_name(names, f), importance.mean_abs[f].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn feature_name(names: &[String], f: usize) -> String {
    names.get(f).cloned().unwrap_or_else(|| format!("x{f}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeeswarmPoint {
    pub row: usize,
    pub feature: usize,
    pub shap: f64,
    pub value: f64,
    /// Feature value min-max scaled over the sample; 0.5 for a constant column.
    pub scaled_value: f64,
}

pub fn beeswarm(explanations: &[ShapExplanation], x: &Matrix) -> Result<Vec<BeeswarmPoint>> {
    if explanations.is_empty() {
        return Err(Error::EmptySample);
    }
    if explanations.len() != x.n_rows() {
        return Err(Error::DimensionMismatch {
            expected: x.n_rows(),
            found: explanations.len(),
        });
    }
    let d = x.n_cols();
    let ranges: Vec<(f64, f64)> = (0..d)
        .map(|j| {
            x.rows()
                .map(|r| r[j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        })
        .collect();
    let mut out = Vec::with_capacity(x.n_rows() * d);
    for (row, e) in explanations.iter().enumerate() {
        for (feature, &shap) in e.contributions.iter().enumerate() {
            let value = x.get(row, feature);
            let (lo, hi) = ranges[feature];
            let scaled_value = if hi > lo { (value - lo) / (hi - lo) } else { 0.5 };
            out.push(BeeswarmPoint {
                row,
                feature,
                shap,
                value,
                scaled_value,
            });
        }
    }
    Ok(out)
}

pub fn write_beeswarm_csv<W: Write>(writer: W, points: &[BeeswarmPoint], names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["row", "feature", "shap", "value", "scaled_value"])?;
    for p in points {
        w.write_record([
            p.row.to_string(),
            feature_name(names, p.feature),
            p.shap.to_string(),
            p.value.to_string(),
            p.scaled_value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaterfallStep {
    pub feature: usize,
    pub value: f64,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waterfall {
    pub base_margin: f64,
    pub output_margin: f64,
    pub base_probability: f64,
    pub output_probability: f64,
    /// By decreasing |contribution|; ties by feature index.
    pub steps: Vec<WaterfallStep>,
}

pub fn waterfall(explanation: &ShapExplanation, x: &[f64]) -> Result<Waterfall> {
    if x.len() != explanation.contributions.len() {
        return Err(Error::DimensionMismatch {
            expected: explanation.contributions.len(),
            found: x.len(),
        });
    }
    let mut steps: Vec<WaterfallStep> = explanation
        .contributions
        .iter()
        .enumerate()
        .map(|(feature, &contribution)| WaterfallStep {
            feature,
            value: x[feature],
            contribution,
        })
        .collect();
    steps.sort_by(|a, b| {
        b.contribution
            .abs()
            .total_cmp(&a.contribution.abs())
            .then(a.feature.cmp(&b.feature))
    });
    let to_prob = |m: f64| match explanation.space {
        Space::Margin => sigmoid(m),
        Space::Probability => m,
    };
    Ok(Waterfall {
        base_margin: explanation.base_value,
        output_margin: explanation.model_output,
        base_probability: to_prob(explanation.base_value),
        output_probability: to_prob(explanation.model_output),
        steps,
    })
}

pub fn write_waterfall_csv<W: Write>(writer: W, wf: &Waterfall, names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["feature", "value", "contribution", "cumulative_margin"])?;
    w.write_record(["base".to_string(), String::new(), String::new(), wf.base_margin.to_string()])?;
    let mut acc = wf.base_margin;
    for s in &wf.steps {
        acc += s.contribution;
        w.write_record([
            feature_name(names, s.feature),
            s.value.to_string(),
            s.contribution.to_string(),
            acc.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pathway {
    pub rule: RulePath,
    pub description: String,
    /// Rows routed to this leaf.
    pub rows: usize,
    /// Fraction of those rows where the teacher agrees with the leaf label;
    /// absent for leaves no row reaches.
    pub agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub tree: DecisionTree,
    pub teacher_threshold: f64,
    pub mimicry_accuracy: f64,
    pub pathways: Vec<Pathway>,
    pub coverage: usize,
}

impl SurrogateReport {
    pub fn rule_listing(&self) -> String {
        let mut s = String::new();
        for p in &self.pathways {
            s.push_str(&p.description);
            match p.agreement {
                Some(a) => s.push_str(&format!(" [rows {}, agreement {a:.4}]\n", p.rows)),
                None => s.push_str(" [rows 0]\n"),
            }
        }
        s
    }
}

/// Fits a shallow classification tree to the teacher's hard labels
/// (`score >= threshold`) and scores how often it reproduces them on `x`.
pub fn distill_surrogate(
    teacher_scores: &[f64],
    x: &Matrix,
    threshold: f64,
    config: &SplitConfig,
    names: &[String],
) -> Result<SurrogateReport> {
    if x.n_rows() == 0 {
        return Err(Error::EmptySample);
    }
    if teacher_scores.len() != x.n_rows() {
        return Err(Error::DimensionMismatch {
            expected: x.n_rows(),
            found: teacher_scores.len(),
        });
    }
    if let Some(bad) = teacher_scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("teacher score {bad}")));
    }
    let labels: Vec<u8> = teacher_scores.iter().map(|&s| u8::from(s >= threshold)).collect();
    let tree = fit_classification_tree(x, &labels, &vec![1.0; labels.len()], config)?;
    let hard = |v: f64| u8::from(v >= 0.5);

    let mut rows = vec![0usize; tree.nodes.len()];
    let mut agree = vec![0usize; tree.nodes.len()];
    for (r, &label) in x.rows().zip(&labels) {
        let leaf = tree.leaf_index(r);
        rows[leaf] += 1;
        if let Node::Leaf { value, .. } = tree.nodes[leaf] {
            agree[leaf] += usize::from(hard(value) == label);
        }
    }
    let matched: usize = agree.iter().sum();
    let pathways = extract_paths(&tree)
        .into_iter()
        .map(|rule| Pathway {
            description: rule.describe(names),
            rows: rows[rule.leaf],
            agreement: (rows[rule.leaf] > 0).then(|| agree[rule.leaf] as f64 / rows[rule.leaf] as f64),
            rule,
        })
        .collect();
    Ok(SurrogateReport {
        tree,
        teacher_threshold: threshold,
        mimicry_accuracy: matched as f64 / x.n_rows() as f64,
        pathways,
        coverage: x.n_rows(),
    })
}
