//! Weighted-average ensembles over member probabilities.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{roc_auc_ratio, AucRatio};
use crate::par;

pub const DEFAULT_MEMBER_THRESHOLD: f64 = 0.80;
pub const DEFAULT_STEP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<String>,
    pub weights: Vec<f64>,
}

impl EnsembleSpec {
    pub fn new(members: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        let spec = EnsembleSpec { members, weights };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() || self.members.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.members.len(),
                found: self.weights.len(),
            });
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("weights must be finite and >= 0".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("weights sum to {total}")));
        }
        Ok(())
    }

    /// Weighted mean of one row of member probabilities.
    pub fn predict(&self, member_probs: &BTreeMap<String, f64>) -> Result<f64> {
        let mut probs = Vec::with_capacity(self.members.len());
        for m in &self.members {
            probs.push(*member_probs.get(m).ok_or_else(|| Error::MissingMember(m.clone()))?);
        }
        Ok(combine(&self.weights, &probs))
    }

    /// Weighted mean over a batch. Each member maps to one probability per row.
    pub fn predict_batch(&self, member_probs: &BTreeMap<String, Vec<f64>>) -> Result<Vec<f64>> {
        let mut cols = Vec::with_capacity(self.members.len());
        for m in &self.members {
            cols.push(
                member_probs
                    .get(m)
                    .ok_or_else(|| Error::MissingMember(m.clone()))?
                    .as_slice(),
            );
        }
        combine_columns(&self.weights, &cols)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let spec: EnsembleSpec = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

fn combine(weights: &[f64], probs: &[f64]) -> f64 {
    let p: f64 = weights.iter().zip(probs).map(|(w, p)| w * p).sum();
    p.clamp(0.0, 1.0)
}

fn combine_columns(weights: &[f64], cols: &[&[f64]]) -> Result<Vec<f64>> {
    let n = cols.first().map_or(0, |c| c.len());
    if let Some(bad) = cols.iter().find(|c| c.len() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: bad.len(),
        });
    }
    let mut row = vec![0.0; cols.len()];
    Ok((0..n)
        .map(|i| {
            for (r, c) in row.iter_mut().zip(cols) {
                *r = c[i];
            }
            combine(weights, &row)
        })
        .collect())
}

/// Models with validation AUC strictly above `threshold`, best first.
/// Equal AUCs keep their input order.
pub fn select_members(validation_aucs: &[(String, f64)], threshold: f64) -> Result<Vec<String>> {
    let mut kept: Vec<&(String, f64)> = validation_aucs.iter().filter(|(_, auc)| *auc > threshold).collect();
    if kept.is_empty() {
        return Err(Error::NoMemberQualifies { threshold });
    }
    kept.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(kept.into_iter().map(|(name, _)| name.clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyScore {
    pub name: String,
    pub weights: Vec<f64>,
    pub validation_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub members: Vec<String>,
    pub member_aucs: Vec<f64>,
    pub step: f64,
    pub grid_points: usize,
    pub strategies: Vec<StrategyScore>,
    /// Optimized AUC minus the best single member's AUC.
    pub margin_over_best_member: f64,
}

impl StrategyReport {
    pub fn strategy(&self, name: &str) -> Option<&StrategyScore> {
        self.strategies.iter().find(|s| s.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSearch {
    pub step: f64,
    /// Also consider the equal-weight and AUC-proportional weightings, which
    /// generally lie off the grid.
    pub include_reference_weights: bool,
}

impl Default for WeightSearch {
    fn default() -> Self {
        WeightSearch {
            step: DEFAULT_STEP,
            include_reference_weights: true,
        }
    }
}

/// All nonnegative integer vectors of length `m` summing to `total`, in
/// lexicographically descending order.
pub fn compositions(total: usize, m: usize) -> Vec<Vec<usize>> {
    fn rec(left: usize, slots: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for v in (0..=left).rev() {
            cur.push(v);
            rec(left - v, slots - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if m > 0 {
        rec(total, m, &mut Vec::with_capacity(m), &mut out);
    }
    out
}

fn grid_total(step: f64) -> Result<usize> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::InvalidArgument(format!("step {step} outside (0, 1]")));
    }
    let k = (1.0 / step).round();
    if (k * step - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("1/{step} is not an integer")));
    }
    Ok(k as usize)
}

struct Candidate {
    weights: Vec<f64>,
    auc: AucRatio,
}

/// `a` beats `b`: higher AUC, then larger weights read in member-AUC order.
fn better(a: &Candidate, b: &Candidate, order: &[usize]) -> bool {
    // Same labels, so AUCs share a denominator and compare exactly.
    match a.auc.twice_u.cmp(&b.auc.twice_u) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => {
            for &i in order {
                match a.weights[i].total_cmp(&b.weights[i]) {
                    Ordering::Greater => return true,
                    Ordering::Less => return false,
                    Ordering::Equal => {}
                }
            }
            false
        }
    }
}

/// Exhaustive search over the weight simplex at `search.step`.
///
/// `member_probs[j]` holds member `j`'s validation probabilities.
pub fn optimize_weights(
    members: &[String],
    member_probs: &[Vec<f64>],
    labels: &[u8],
    search: WeightSearch,
) -> Result<(EnsembleSpec, StrategyReport)> {
    let m = members.len();
    if m == 0 || member_probs.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: member_probs.len(),
        });
    }
    let total = grid_total(search.step)?;
    let cols: Vec<&[f64]> = member_probs.iter().map(Vec::as_slice).collect();
    let score = |w: &[f64]| -> Result<AucRatio> { roc_auc_ratio(&combine_columns(w, &cols)?, labels) };

    let member_auc: Vec<AucRatio> = cols.iter().map(|c| roc_auc_ratio(c, labels)).collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| member_auc[b].twice_u.cmp(&member_auc[a].twice_u));

    let grid = compositions(total, m);
    let grid_points = grid.len();
    let mut candidates: Vec<Vec<f64>> = grid
        .into_iter()
        .map(|c| c.into_iter().map(|k| k as f64 / total as f64).collect())
        .collect();
    let simple = vec![1.0 / m as f64; m];
    let auc_sum: f64 = member_auc.iter().map(AucRatio::value).sum();
    let proportional: Vec<f64> = member_auc.iter().map(|a| a.value() / auc_sum).collect();
    if search.include_reference_weights {
        candidates.push(simple.clone());
        candidates.push(proportional.clone());
    }
    let scored = par::map_slice(&candidates, |w| score(w).map(|auc| Candidate { weights: w.clone(), auc }));
    let mut best: Option<Candidate> = None;
    for c in scored {
        let c = c?;
        if best.as_ref().is_none_or(|b| better(&c, b, &order)) {
            best = Some(c);
        }
    }
    let best = best.expect("grid is never empty");

    let strategies = vec![
        StrategyScore {
            name: "simple_average".into(),
            validation_auc: score(&simple)?.value(),
            weights: simple,
        },
        StrategyScore {
            name: "performance_weighted".into(),
            validation_auc: score(&proportional)?.value(),
            weights: proportional,
        },
        StrategyScore {
            name: "optimized".into(),
            weights: best.weights.clone(),
            validation_auc: best.auc.value(),
        },
    ];
    let best_member = member_auc[order[0]].value();
    let report = StrategyReport {
        members: members.to_vec(),
        member_aucs: member_auc.iter().map(AucRatio::value).collect(),
        step: search.step,
        grid_points,
        strategies,
        margin_over_best_member: best.auc.value() - best_member,
    };
    let spec = EnsembleSpec {
        members: members.to_vec(),
        weights: best.weights,
    };
    Ok((spec, report))
}
