//! Class-weighted logistic regression and random forest.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ClassWeights;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par;
use crate::seed;
use crate::trees::{self, DecisionTree, FeatureIndex, GrowOptions, Growth, SplitConfig};

const CHUNK: usize = 2048;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn check_binary(x: &Matrix, y: &[u8]) -> Result<()> {
    if x.n_rows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.n_rows(),
            found: y.len(),
        });
    }
    if let Some(i) = y.iter().position(|&v| v > 1) {
        return Err(Error::TargetNotBinary { row: i + 1 });
    }
    if y.is_empty() || y.iter().all(|&v| v == y[0]) {
        return Err(Error::SingleClass);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    pub max_iters: usize,
    /// Initial step of the backtracking line search.
    pub step_size: f64,
    pub l2: f64,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            step_size: 1.0,
            l2: 1.0,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2: f64,
    pub iterations: usize,
}

impl LinearModel {
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                found: x.len(),
            });
        }
        Ok(sigmoid(self.margin(x)))
    }

    pub fn predict_matrix(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.n_cols() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                found: x.n_cols(),
            });
        }
        Ok(x.rows().map(|r| sigmoid(self.margin(r))).collect())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

/// Weighted logistic objective
/// `(1/W) * (sum_i s_i * loss_i + l2/2 * |w|^2)` with `W = sum_i s_i`;
/// the bias is not penalized. Parameters are `[w..., bias]`.
pub struct LogisticProblem<'a> {
    x: &'a Matrix,
    y: &'a [u8],
    s: Vec<f64>,
    total_weight: f64,
    l2: f64,
}

impl<'a> LogisticProblem<'a> {
    pub fn new(x: &'a Matrix, y: &'a [u8], weights: ClassWeights, l2: f64) -> Result<Self> {
        check_binary(x, y)?;
        let s = weights.sample_weights(y);
        let total_weight = s.iter().sum();
        Ok(Self {
            x,
            y,
            s,
            total_weight,
            l2,
        })
    }

    pub fn dim(&self) -> usize {
        self.x.n_cols() + 1
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        self.loss_and_grad(theta).0
    }

    pub fn loss_and_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let d = self.x.n_cols();
        let n = self.x.n_rows();
        let chunks = n.div_ceil(CHUNK);
        let parts = par::map_range(chunks, |c| {
            let mut loss = 0.0;
            let mut grad = vec![0.0; d + 1];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let row = self.x.row(i);
                let z = theta[d] + row.iter().zip(theta).map(|(v, w)| v * w).sum::<f64>();
                let y = f64::from(self.y[i]);
                loss += self.s[i] * (softplus(z) - y * z);
                let r = self.s[i] * (sigmoid(z) - y);
                for (g, v) in grad.iter_mut().zip(row) {
                    *g += r * v;
                }
                grad[d] += r;
            }
            (loss, grad)
        });
        let mut loss = 0.0;
        let mut grad = vec![0.0; d + 1];
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        let penalty: f64 = theta[..d].iter().map(|w| w * w).sum();
        loss += 0.5 * self.l2 * penalty;
        for (g, w) in grad.iter_mut().zip(&theta[..d]) {
            *g += self.l2 * w;
        }
        let inv = 1.0 / self.total_weight;
        grad.iter_mut().for_each(|g| *g *= inv);
        (loss * inv, grad)
    }
}

/// Full-batch gradient descent with Armijo backtracking, so the objective
/// never increases between iterations.
pub fn fit_logistic(
    x: &Matrix,
    y: &[u8],
    class_weights: ClassWeights,
    config: &LogisticConfig,
) -> Result<LinearModel> {
    if !(config.step_size > 0.0 && config.l2 >= 0.0 && config.tolerance >= 0.0) {
        return Err(Error::InvalidArgument("invalid logistic config".into()));
    }
    let problem = LogisticProblem::new(x, y, class_weights, config.l2)?;
    let mut theta = vec![0.0; problem.dim()];
    let (mut loss, mut grad) = problem.loss_and_grad(&theta);
    let mut step = config.step_size;
    let mut iterations = 0;
    while iterations < config.max_iters {
        let norm2: f64 = grad.iter().map(|g| g * g).sum();
        if !norm2.is_finite() || !loss.is_finite() {
            return Err(Error::NonFinite("logistic objective".into()));
        }
        if norm2.sqrt() < config.tolerance {
            break;
        }
        iterations += 1;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - step * g).collect();
            let (l, g) = problem.loss_and_grad(&trial);
            if l <= loss - 1e-4 * step * norm2 {
                theta = trial;
                loss = l;
                grad = g;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        step = (step * 2.0).min(config.step_size * 1e3);
    }
    let d = x.n_cols();
    Ok(LinearModel {
        weights: theta[..d].to_vec(),
        bias: theta[d],
        l2: config.l2,
        iterations,
    })
}

/// Features searched per split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSubsample {
    /// `max(1, floor(sqrt(d)))`
    Sqrt,
    All,
    Fraction(f64),
}

impl FeatureSubsample {
    pub fn count(&self, d: usize) -> usize {
        let k = match *self {
            FeatureSubsample::Sqrt => (d as f64).sqrt().floor() as usize,
            FeatureSubsample::All => d,
            FeatureSubsample::Fraction(f) => (f * d as f64).round() as usize,
        };
        k.clamp(1, d.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_estimators: usize,
    pub split: SplitConfig,
    pub feature_subsample: FeatureSubsample,
    /// Draw a bootstrap resample per tree; off only in tests.
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_estimators: 100,
            split: SplitConfig {
                max_depth: 7,
                min_samples_split: 20,
                min_samples_leaf: 10,
                min_gain: 0.0,
            },
            feature_subsample: FeatureSubsample::Sqrt,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
    pub feature_subsample: FeatureSubsample,
    pub seed: u64,
}

impl ForestModel {
    pub fn feature_count(&self) -> usize {
        self.trees[0].feature_count
    }

    /// Mean of the member trees' positive-class probabilities.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.feature_count() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_count(),
                found: x.len(),
            });
        }
        let sum: f64 = self.trees.iter().map(|t| t.predict_unchecked(x)).sum();
        Ok(sum / self.trees.len() as f64)
    }

    pub fn predict_matrix(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.n_cols() != self.feature_count() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_count(),
                found: x.n_cols(),
            });
        }
        Ok(par::map_range(x.n_rows(), |i| {
            let r = x.row(i);
            self.trees.iter().map(|t| t.predict_unchecked(r)).sum::<f64>() / self.trees.len() as f64
        }))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        if model.trees.is_empty() {
            return Err(Error::InvalidArgument("forest has no trees".into()));
        }
        for t in &model.trees {
            t.validate()?;
        }
        Ok(model)
    }
}

pub fn fit_random_forest(
    x: &Matrix,
    y: &[u8],
    class_weights: ClassWeights,
    config: &ForestConfig,
) -> Result<ForestModel> {
    check_binary(x, y)?;
    if config.n_estimators == 0 {
        return Err(Error::InvalidArgument("n_estimators must be >= 1".into()));
    }
    let index = FeatureIndex::new(x)?;
    let weights = class_weights.sample_weights(y);
    let n = x.n_rows();
    let k = config.feature_subsample.count(x.n_cols());
    let trees = par::map_range(config.n_estimators, |t| {
        let rows: Vec<usize> = if config.bootstrap {
            let mut rng = seed::derived_rng(config.seed, "forest-bootstrap", t as u64);
            (0..n).map(|_| rng.random_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        let opts = GrowOptions {
            growth: Growth::Depthwise,
            max_features: Some(k),
            seed: seed::derive(config.seed, "forest-features", t as u64),
        };
        trees::grow_classification(&index, &rows, y, &weights, &config.split, &opts)
    });
    Ok(ForestModel {
        trees: trees.into_iter().collect::<Result<_>>()?,
        feature_subsample: config.feature_subsample,
        seed: config.seed,
    })
}
