//! Binary decision trees with exact greedy split search.
//!
//! One grower serves three roles: weighted-Gini classification trees
//! (forest members, surrogates), and second-order regression trees fit to
//! gradient/hessian pairs (boosting base learners). Candidate thresholds are
//! midpoints between consecutive distinct feature values; an example goes
//! left iff `x[feature] <= threshold`. Equal gains resolve to the lowest
//! feature index, then the lowest threshold.

use std::fmt::Write as _;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par;
use crate::seed;

/// Nodes smaller than this search features sequentially.
const PAR_MIN_ROWS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub min_gain: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            max_depth: 6,
            min_samples_split: 2,
            min_samples_leaf: 1,
            min_gain: 0.0,
        }
    }
}

impl SplitConfig {
    pub fn with_depth(max_depth: usize) -> Self {
        Self {
            max_depth,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_samples_leaf == 0 {
            return Err(Error::InvalidArgument("min_samples_leaf must be >= 1".into()));
        }
        if !(self.min_gain >= 0.0 && self.min_gain.is_finite()) {
            return Err(Error::InvalidArgument("min_gain must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// How a tree is expanded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum Growth {
    /// Split every eligible node, level by level, up to `max_depth`.
    Depthwise,
    /// Repeatedly split the open leaf with the highest gain until the tree
    /// has `num_leaves` leaves (`max_depth` still applies).
    Leafwise { num_leaves: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowOptions {
    pub growth: Growth,
    /// Features drawn (without replacement) per split; `None` searches all.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for GrowOptions {
    fn default() -> Self {
        Self {
            growth: Growth::Depthwise,
            max_features: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Internal {
        id: usize,
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        cover: f64,
        gain: f64,
    },
    Leaf {
        id: usize,
        value: f64,
        /// Weighted (negative, positive) mass; zero for regression trees.
        class_counts: [f64; 2],
        cover: f64,
    },
}

impl Node {
    pub fn id(&self) -> usize {
        match self {
            Node::Internal { id, .. } | Node::Leaf { id, .. } => *id,
        }
    }

    pub fn cover(&self) -> f64 {
        match self {
            Node::Internal { cover, .. } | Node::Leaf { cover, .. } => *cover,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Node::Leaf { .. })
    }
}

/// Arena-backed tree; node 0 is the root and children always have larger
/// ids than their parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub kind: TreeKind,
    pub max_depth: usize,
    pub feature_count: usize,
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    /// Single-leaf tree.
    pub fn constant(kind: TreeKind, feature_count: usize, value: f64, cover: f64) -> Self {
        Self {
            kind,
            max_depth: 0,
            feature_count,
            nodes: vec![Node::Leaf {
                id: 0,
                value,
                class_counts: [0.0, 0.0],
                cover,
            }],
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        let mut max = 0;
        for node in &self.nodes {
            if let Node::Internal { id, left, right, .. } = *node {
                depth[left] = depth[id] + 1;
                depth[right] = depth[id] + 1;
                max = max.max(depth[id] + 1);
            }
        }
        max
    }

    /// Index of the leaf reached by `x`. `x` must have `feature_count` entries.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { .. } => return at,
                Node::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_count {
            return Err(Error::DimensionMismatch {
                expected: self.feature_count,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Leaf value: positive-class probability for classification trees,
    /// raw output for regression trees.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x)?;
        Ok(self.predict_unchecked(x))
    }

    pub fn predict_unchecked(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            Node::Leaf { value, .. } => value,
            Node::Internal { .. } => unreachable!(),
        }
    }

    /// (negative, positive) probabilities from the weighted leaf counts.
    pub fn class_probabilities(&self, x: &[f64]) -> Result<[f64; 2]> {
        self.check_len(x)?;
        match self.nodes[self.leaf_index(x)] {
            Node::Leaf { value, .. } => Ok([1.0 - value, value]),
            Node::Internal { .. } => unreachable!(),
        }
    }

    pub fn predict_matrix(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.n_cols() != self.feature_count {
            return Err(Error::DimensionMismatch {
                expected: self.feature_count,
                found: x.n_cols(),
            });
        }
        Ok(x.rows().map(|r| self.predict_unchecked(r)).collect())
    }

    /// Structural checks for trees read from disk.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("invalid tree: {m}")));
        if self.nodes.is_empty() {
            return bad("no nodes".into());
        }
        let mut referenced = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id() != i {
                return bad(format!("node at position {i} has id {}", node.id()));
            }
            if !(node.cover() > 0.0 && node.cover().is_finite()) {
                return Err(Error::MissingCovers { node: i });
            }
            if let Node::Internal {
                feature,
                threshold,
                left,
                right,
                ..
            } = *node
            {
                if feature >= self.feature_count {
                    return bad(format!("node {i} splits on feature {feature}"));
                }
                if threshold.is_nan() {
                    return bad(format!("node {i} has a NaN threshold"));
                }
                for child in [left, right] {
                    if child <= i || child >= self.nodes.len() || referenced[child] {
                        return bad(format!("node {i} has bad child {child}"));
                    }
                    referenced[child] = true;
                }
            }
        }
        if referenced.iter().skip(1).any(|r| !r) {
            return bad("unreachable node".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let tree: Self = serde_json::from_str(text)?;
        tree.validate()?;
        Ok(tree)
    }
}

/// Column-major copy of a feature matrix plus a per-feature row order sorted
/// by value. Built once and shared by every tree fit on the same matrix.
#[derive(Debug, Clone)]
pub struct FeatureIndex {
    n_rows: usize,
    columns: Vec<Vec<f64>>,
    order: Vec<Vec<u32>>,
}

impl FeatureIndex {
    pub fn new(x: &Matrix) -> Result<Self> {
        if x.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        if x.n_rows() > u32::MAX as usize {
            return Err(Error::InvalidArgument("too many rows".into()));
        }
        let columns: Vec<Vec<f64>> = (0..x.n_cols()).map(|j| x.column(j)).collect();
        let order = par::map_slice(&columns, |col| {
            let mut o: Vec<u32> = (0..col.len() as u32).collect();
            o.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]));
            o
        });
        Ok(Self {
            n_rows: x.n_rows(),
            columns,
            order,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.columns[feature][row]
    }
}

#[derive(Debug, Clone, Copy)]
enum Objective {
    Gini,
    Newton { lambda: f64, alpha: f64 },
}

fn soft_threshold(g: f64, alpha: f64) -> f64 {
    g.signum() * (g.abs() - alpha).max(0.0)
}

impl Objective {
    /// Split gain for per-node sums `[a, b]`: class masses for Gini,
    /// (gradient, hessian) for Newton. `None` marks an inadmissible split.
    fn gain(&self, parent: [f64; 2], left: [f64; 2], right: [f64; 2]) -> Option<f64> {
        match *self {
            Objective::Gini => {
                // weighted impurity decrease per unit of parent weight
                let score = |s: [f64; 2]| {
                    let w = s[0] + s[1];
                    if w > 0.0 {
                        (s[0] * s[0] + s[1] * s[1]) / w
                    } else {
                        0.0
                    }
                };
                let w = parent[0] + parent[1];
                Some((score(left) + score(right) - score(parent)) / w)
            }
            Objective::Newton { lambda, alpha } => {
                let score = |s: [f64; 2]| {
                    let d = s[1] + lambda;
                    (d > 0.0).then(|| soft_threshold(s[0], alpha).powi(2) / d)
                };
                Some(0.5 * (score(left)? + score(right)? - score(parent)?))
            }
        }
    }

    fn splittable(&self, s: [f64; 2]) -> bool {
        match *self {
            Objective::Gini => s[0] > 0.0 && s[1] > 0.0,
            Objective::Newton { lambda, .. } => s[1] + lambda > 0.0,
        }
    }

    fn leaf(&self, id: usize, s: [f64; 2], count: usize) -> Node {
        match *self {
            Objective::Gini => {
                let w = s[0] + s[1];
                Node::Leaf {
                    id,
                    value: if w > 0.0 { s[1] / w } else { 0.0 },
                    class_counts: s,
                    cover: w,
                }
            }
            Objective::Newton { lambda, alpha } => {
                let d = s[1] + lambda;
                Node::Leaf {
                    id,
                    value: if d > 0.0 { -soft_threshold(s[0], alpha) / d } else { 0.0 },
                    class_counts: [0.0, 0.0],
                    cover: count as f64,
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

#[derive(Debug, Clone, Copy)]
struct Open {
    node: usize,
    start: usize,
    end: usize,
    depth: usize,
    split: Option<Candidate>,
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a * 0.5 + b * 0.5;
    if m >= b || m < a {
        a
    } else {
        m
    }
}

fn stable_partition(segment: &mut [u32], side: &[bool], scratch: &mut Vec<u32>) {
    scratch.clear();
    let mut w = 0;
    for k in 0..segment.len() {
        let p = segment[k];
        if side[p as usize] {
            segment[w] = p;
            w += 1;
        } else {
            scratch.push(p);
        }
    }
    segment[w..].copy_from_slice(scratch);
}

struct Grower<'a> {
    index: &'a FeatureIndex,
    /// Position -> data row (a sorted multiset).
    rows: Vec<usize>,
    stats: Vec<[f64; 2]>,
    objective: Objective,
    config: SplitConfig,
    /// Positions of each node, ascending, node segments contiguous.
    members: Vec<u32>,
    /// Per feature, positions ordered by value, node segments contiguous.
    sorted: Vec<Vec<u32>>,
    side: Vec<bool>,
    max_features: Option<usize>,
    rng: seed::Rng,
    nodes: Vec<Node>,
}

impl<'a> Grower<'a> {
    fn new(
        index: &'a FeatureIndex,
        rows: &[usize],
        stats_by_row: impl Fn(usize) -> [f64; 2],
        objective: Objective,
        config: SplitConfig,
        opts: &GrowOptions,
    ) -> Self {
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        let stats = rows.iter().map(|&r| stats_by_row(r)).collect();
        let mut first = vec![0u32; index.n_rows];
        let mut count = vec![0u32; index.n_rows];
        for (p, &r) in rows.iter().enumerate() {
            if count[r] == 0 {
                first[r] = p as u32;
            }
            count[r] += 1;
        }
        let sorted = par::map_slice(&index.order, |order| {
            let mut s = Vec::with_capacity(rows.len());
            for &r in order {
                let r = r as usize;
                s.extend(first[r]..first[r] + count[r]);
            }
            s
        });
        let n = rows.len();
        Self {
            index,
            rows,
            stats,
            objective,
            config,
            members: (0..n as u32).collect(),
            sorted,
            side: vec![false; n],
            max_features: opts.max_features,
            rng: seed::rng(opts.seed),
            nodes: Vec::new(),
        }
    }

    fn sum(&self, start: usize, end: usize) -> [f64; 2] {
        let mut s = [0.0, 0.0];
        for &p in &self.members[start..end] {
            let v = self.stats[p as usize];
            s[0] += v[0];
            s[1] += v[1];
        }
        s
    }

    fn best_for_feature(&self, f: usize, start: usize, end: usize, parent: [f64; 2]) -> Option<Candidate> {
        let seg = &self.sorted[f][start..end];
        let n = seg.len();
        let min_leaf = self.config.min_samples_leaf;
        let col = &self.index.columns[f];
        let mut left = [0.0, 0.0];
        let mut best: Option<Candidate> = None;
        for k in 0..n - 1 {
            let p = seg[k] as usize;
            let s = self.stats[p];
            left[0] += s[0];
            left[1] += s[1];
            let n_left = k + 1;
            if n - n_left < min_leaf {
                break;
            }
            if n_left < min_leaf {
                continue;
            }
            let v = col[self.rows[p]];
            let next = col[self.rows[seg[k + 1] as usize]];
            if v == next {
                continue;
            }
            let right = [parent[0] - left[0], parent[1] - left[1]];
            if let Some(gain) = self.objective.gain(parent, left, right) {
                if best.is_none_or(|b| gain > b.gain) {
                    best = Some(Candidate {
                        feature: f,
                        threshold: midpoint(v, next),
                        gain,
                    });
                }
            }
        }
        best
    }

    fn best_split(&mut self, open: &Open) -> Option<Candidate> {
        let n = open.end - open.start;
        if open.depth >= self.config.max_depth
            || n < self.config.min_samples_split
            || n < 2 * self.config.min_samples_leaf
        {
            return None;
        }
        let parent = self.sum(open.start, open.end);
        if !self.objective.splittable(parent) {
            return None;
        }
        let d = self.index.n_features();
        let features: Vec<usize> = match self.max_features {
            Some(k) if k < d => {
                let mut f = sample(&mut self.rng, d, k).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..d).collect(),
        };
        let per_feature: Vec<Option<Candidate>> = if n >= PAR_MIN_ROWS {
            par::map_slice(&features, |&f| self.best_for_feature(f, open.start, open.end, parent))
        } else {
            features
                .iter()
                .map(|&f| self.best_for_feature(f, open.start, open.end, parent))
                .collect()
        };
        let mut best: Option<Candidate> = None;
        for c in per_feature.into_iter().flatten() {
            if best.is_none_or(|b| c.gain > b.gain) {
                best = Some(c);
            }
        }
        best.filter(|c| c.gain > 0.0 && c.gain >= self.config.min_gain)
    }

    fn make_leaf(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        let s = self.sum(start, end);
        self.nodes.push(self.objective.leaf(id, s, end - start));
        id
    }

    fn split(&mut self, open: &Open, c: Candidate) -> [Open; 2] {
        let (start, end) = (open.start, open.end);
        let col = &self.index.columns[c.feature];
        for &p in &self.members[start..end] {
            self.side[p as usize] = col[self.rows[p as usize]] <= c.threshold;
        }
        let n_left = self.members[start..end]
            .iter()
            .filter(|&&p| self.side[p as usize])
            .count();
        let side = &self.side;
        let mut scratch = Vec::new();
        stable_partition(&mut self.members[start..end], side, &mut scratch);
        if end - start >= PAR_MIN_ROWS {
            par::for_each_chunk_mut(&mut self.sorted, 1, |_, s| {
                stable_partition(&mut s[0][start..end], side, &mut Vec::new());
            });
        } else {
            for s in &mut self.sorted {
                stable_partition(&mut s[start..end], side, &mut scratch);
            }
        }
        let mid = start + n_left;
        let left = self.make_leaf(start, mid);
        let right = self.make_leaf(mid, end);
        self.nodes[open.node] = Node::Internal {
            id: open.node,
            feature: c.feature,
            threshold: c.threshold,
            left,
            right,
            cover: 0.0,
            gain: c.gain,
        };
        let child = |node, start, end| Open {
            node,
            start,
            end,
            depth: open.depth + 1,
            split: None,
        };
        [child(left, start, mid), child(right, mid, end)]
    }

    fn grow(mut self, growth: Growth, kind: TreeKind) -> DecisionTree {
        let n = self.rows.len();
        self.make_leaf(0, n);
        let mut root = Open {
            node: 0,
            start: 0,
            end: n,
            depth: 0,
            split: None,
        };
        match growth {
            Growth::Depthwise => {
                let mut queue = std::collections::VecDeque::from([root]);
                while let Some(open) = queue.pop_front() {
                    if let Some(c) = self.best_split(&open) {
                        queue.extend(self.split(&open, c));
                    }
                }
            }
            Growth::Leafwise { num_leaves } => {
                root.split = self.best_split(&root);
                let mut open = vec![root];
                let mut leaves = 1;
                while leaves < num_leaves {
                    let mut pick: Option<usize> = None;
                    for (i, o) in open.iter().enumerate() {
                        if let Some(c) = o.split {
                            let better = match pick {
                                None => true,
                                Some(j) => {
                                    let b = open[j].split.unwrap().gain;
                                    c.gain > b || (c.gain == b && o.node < open[j].node)
                                }
                            };
                            if better {
                                pick = Some(i);
                            }
                        }
                    }
                    let Some(i) = pick else { break };
                    let o = open.swap_remove(i);
                    for mut child in self.split(&o, o.split.unwrap()) {
                        child.split = self.best_split(&child);
                        open.push(child);
                    }
                    leaves += 1;
                }
            }
        }
        // internal covers are exact sums of their children
        for i in (0..self.nodes.len()).rev() {
            if let Node::Internal { left, right, .. } = self.nodes[i] {
                let total = self.nodes[left].cover() + self.nodes[right].cover();
                if let Node::Internal { cover, .. } = &mut self.nodes[i] {
                    *cover = total;
                }
            }
        }
        DecisionTree {
            kind,
            max_depth: self.config.max_depth,
            feature_count: self.index.n_features(),
            nodes: self.nodes,
        }
    }
}

fn check_rows(index: &FeatureIndex, rows: &[usize]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyFitSet);
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= index.n_rows) {
        return Err(Error::InvalidArgument(format!("row {r} out of range")));
    }
    Ok(())
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Weighted-Gini tree over the multiset `rows` of an indexed matrix.
/// `y` and `weights` are indexed by data row.
pub fn grow_classification(
    index: &FeatureIndex,
    rows: &[usize],
    y: &[u8],
    weights: &[f64],
    config: &SplitConfig,
    opts: &GrowOptions,
) -> Result<DecisionTree> {
    config.validate()?;
    check_rows(index, rows)?;
    check_len(index.n_rows, y.len())?;
    check_len(index.n_rows, weights.len())?;
    if let Some(i) = y.iter().position(|&v| v > 1) {
        return Err(Error::TargetNotBinary { row: i + 1 });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidArgument("sample weights must be finite and > 0".into()));
    }
    let stats = |r: usize| {
        if y[r] == 1 {
            [0.0, weights[r]]
        } else {
            [weights[r], 0.0]
        }
    };
    Ok(Grower::new(index, rows, stats, Objective::Gini, *config, opts)
        .grow(opts.growth, TreeKind::Classification))
}

/// Second-order regression tree: leaf value `-soft(G, alpha) / (H + lambda)`.
#[allow(clippy::too_many_arguments)]
pub fn grow_regression(
    index: &FeatureIndex,
    rows: &[usize],
    gradients: &[f64],
    hessians: &[f64],
    reg_lambda: f64,
    reg_alpha: f64,
    config: &SplitConfig,
    opts: &GrowOptions,
) -> Result<DecisionTree> {
    config.validate()?;
    check_rows(index, rows)?;
    check_len(index.n_rows, gradients.len())?;
    check_len(index.n_rows, hessians.len())?;
    if gradients.iter().chain(hessians).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradients or hessians".into()));
    }
    if hessians.iter().any(|&h| h < 0.0) {
        return Err(Error::InvalidArgument("hessians must be >= 0".into()));
    }
    if !(reg_lambda >= 0.0 && reg_alpha >= 0.0) {
        return Err(Error::InvalidArgument("regularization must be >= 0".into()));
    }
    let objective = Objective::Newton {
        lambda: reg_lambda,
        alpha: reg_alpha,
    };
    let stats = |r: usize| [gradients[r], hessians[r]];
    Ok(Grower::new(index, rows, stats, objective, *config, opts)
        .grow(opts.growth, TreeKind::Regression))
}

pub fn fit_classification_tree(
    x: &Matrix,
    y: &[u8],
    sample_weights: &[f64],
    config: &SplitConfig,
) -> Result<DecisionTree> {
    let index = FeatureIndex::new(x)?;
    let rows: Vec<usize> = (0..x.n_rows()).collect();
    grow_classification(&index, &rows, y, sample_weights, config, &GrowOptions::default())
}

pub fn fit_regression_tree(
    x: &Matrix,
    gradients: &[f64],
    hessians: &[f64],
    reg_lambda: f64,
    reg_alpha: f64,
    config: &SplitConfig,
) -> Result<DecisionTree> {
    let index = FeatureIndex::new(x)?;
    let rows: Vec<usize> = (0..x.n_rows()).collect();
    grow_regression(
        &index,
        &rows,
        gradients,
        hessians,
        reg_lambda,
        reg_alpha,
        config,
        &GrowOptions::default(),
    )
}

/// Bounds on one feature along a root-to-leaf path: `lower < x <= upper`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub feature: usize,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl Condition {
    pub fn holds(&self, x: &[f64]) -> bool {
        let v = x[self.feature];
        self.lower.is_none_or(|l| v > l) && self.upper.is_none_or(|u| v <= u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulePath {
    pub leaf: usize,
    /// One entry per feature tested on the path, ascending by feature.
    pub conditions: Vec<Condition>,
    pub prediction: f64,
    pub cover: f64,
}

impl RulePath {
    pub fn matches(&self, x: &[f64]) -> bool {
        self.conditions.iter().all(|c| c.holds(x))
    }

    pub fn describe(&self, names: &[String]) -> String {
        let name = |f: usize| names.get(f).cloned().unwrap_or_else(|| format!("x{f}"));
        let mut parts = Vec::new();
        for c in &self.conditions {
            match (c.lower, c.upper) {
                (Some(l), Some(u)) => parts.push(format!("{l} < {} <= {u}", name(c.feature))),
                (Some(l), None) => parts.push(format!("{} > {l}", name(c.feature))),
                (None, Some(u)) => parts.push(format!("{} <= {u}", name(c.feature))),
                (None, None) => {}
            }
        }
        let cond = if parts.is_empty() {
            "always".to_string()
        } else {
            parts.join(" AND ")
        };
        format!("IF {cond} THEN {:.4} (cover {})", self.prediction, self.cover)
    }
}

/// One rule per leaf, in leaf-id order.
pub fn extract_paths(tree: &DecisionTree) -> Vec<RulePath> {
    fn walk(tree: &DecisionTree, at: usize, bounds: &mut Vec<Condition>, out: &mut Vec<RulePath>) {
        match tree.nodes[at] {
            Node::Leaf { value, cover, .. } => {
                let mut conditions: Vec<Condition> = bounds
                    .iter()
                    .filter(|c| c.lower.is_some() || c.upper.is_some())
                    .copied()
                    .collect();
                conditions.sort_by_key(|c| c.feature);
                out.push(RulePath {
                    leaf: at,
                    conditions,
                    prediction: value,
                    cover,
                });
            }
            Node::Internal {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                let saved = bounds[feature];
                bounds[feature].upper = Some(saved.upper.map_or(threshold, |u| u.min(threshold)));
                walk(tree, left, bounds, out);
                bounds[feature] = saved;
                bounds[feature].lower = Some(saved.lower.map_or(threshold, |l| l.max(threshold)));
                walk(tree, right, bounds, out);
                bounds[feature] = saved;
            }
        }
    }
    let mut bounds: Vec<Condition> = (0..tree.feature_count)
        .map(|feature| Condition {
            feature,
            lower: None,
            upper: None,
        })
        .collect();
    let mut out = Vec::new();
    walk(tree, 0, &mut bounds, &mut out);
    out.sort_by_key(|p| p.leaf);
    out
}

/// Indented text rendering of a tree.
pub fn render(tree: &DecisionTree, names: &[String]) -> String {
    fn go(tree: &DecisionTree, at: usize, depth: usize, names: &[String], out: &mut String) {
        let pad = "  ".repeat(depth);
        match tree.nodes[at] {
            Node::Leaf { value, cover, .. } => {
                let _ = writeln!(out, "{pad}leaf {at}: {value:.4} (cover {cover})");
            }
            Node::Internal {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                let name = names.get(feature).cloned().unwrap_or_else(|| format!("x{feature}"));
                let _ = writeln!(out, "{pad}{name} <= {threshold}");
                go(tree, left, depth + 1, names, out);
                let _ = writeln!(out, "{pad}{name} > {threshold}");
                go(tree, right, depth + 1, names, out);
            }
        }
    }
    let mut out = String::new();
    go(tree, 0, 0, names, &mut out);
    out
}
