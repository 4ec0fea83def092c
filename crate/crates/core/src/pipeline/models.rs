use crate::baselines::{fit_logistic, fit_random_forest, ForestConfig, ForestModel, LinearModel};
use crate::boosting::{fit_gbm, BoostedModel, GbmConfig};
use crate::convnet::{self, Network, NetworkSpec, TrainConfig, TrainOutcome};
use crate::dataset::{compute_class_weights, stratified_subsample};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

use super::config::{PipelineConfig, CNN, GBM_DEPTHWISE, GBM_LEAFWISE, LOGISTIC, RANDOM_FOREST};

pub enum TrainedModel {
    Logistic(LinearModel),
    Forest(ForestModel),
    Gbm(BoostedModel),
    Cnn(Network),
}

impl TrainedModel {
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        match self {
            TrainedModel::Logistic(m) => m.predict_matrix(x),
            TrainedModel::Forest(m) => m.predict_matrix(x),
            TrainedModel::Gbm(m) => m.predict_matrix(x),
            TrainedModel::Cnn(m) => m.predict_proba(x),
        }
    }

    pub fn serialize(&self) -> Result<String> {
        match self {
            TrainedModel::Logistic(m) => m.to_toml(),
            TrainedModel::Forest(m) => m.to_json(),
            TrainedModel::Gbm(m) => m.to_json(),
            TrainedModel::Cnn(m) => m.to_json(),
        }
    }

    pub fn deserialize(name: &str, text: &str) -> Result<Self> {
        Ok(match name {
            LOGISTIC => TrainedModel::Logistic(LinearModel::from_toml(text)?),
            RANDOM_FOREST => TrainedModel::Forest(ForestModel::from_json(text)?),
            GBM_DEPTHWISE | GBM_LEAFWISE => TrainedModel::Gbm(BoostedModel::from_json(text)?),
            CNN => TrainedModel::Cnn(Network::from_json(text)?),
            other => return Err(Error::InvalidArgument(format!("unknown model `{other}`"))),
        })
    }

    pub fn as_boosted(&self) -> Option<&BoostedModel> {
        match self {
            TrainedModel::Gbm(m) => Some(m),
            _ => None,
        }
    }
}

pub fn file_name(name: &str) -> String {
    if name == LOGISTIC {
        format!("{name}.toml")
    } else {
        format!("{name}.json")
    }
}

pub fn model_seed(master: u64, name: &str) -> u64 {
    seed::derive(master, &format!("model:{name}"), 0)
}

pub fn gbm_config(config: &PipelineConfig, name: &str, seed: u64) -> GbmConfig {
    let base = if name == GBM_DEPTHWISE {
        config.models.gbm_depthwise
    } else {
        config.models.gbm_leafwise
    };
    GbmConfig { seed, ..base }
}

pub struct Fitted {
    pub model: TrainedModel,
    pub cnn: Option<TrainOutcome>,
    pub note: String,
}

/// Fits roster model `name`. The network needs held-out rows for early
/// stopping; when `val` is `None` a stratified fifth of the training rows is
/// carved off for that purpose.
pub fn fit(
    config: &PipelineConfig,
    name: &str,
    train: (&Matrix, &[u8]),
    val: Option<(&Matrix, &[u8])>,
    seed: u64,
    cnn_epochs: Option<usize>,
) -> Result<Fitted> {
    let (x, y) = train;
    let all: Vec<usize> = (0..y.len()).collect();
    let weights = compute_class_weights(y, &all)?;
    Ok(match name {
        LOGISTIC => {
            let m = fit_logistic(x, y, weights, &config.models.logistic)?;
            let note = format!("iterations {}", m.iterations);
            Fitted {
                model: TrainedModel::Logistic(m),
                cnn: None,
                note,
            }
        }
        RANDOM_FOREST => {
            let fc = ForestConfig {
                seed,
                ..config.models.random_forest
            };
            Fitted {
                model: TrainedModel::Forest(fit_random_forest(x, y, weights, &fc)?),
                cnn: None,
                note: format!("trees {}", fc.n_estimators),
            }
        }
        GBM_DEPTHWISE | GBM_LEAFWISE => {
            let m = fit_gbm(x, y, &gbm_config(config, name, seed))?;
            let note = format!("rounds {}, scale_pos_weight {}", m.trees.len(), m.scale_pos_weight);
            Fitted {
                model: TrainedModel::Gbm(m),
                cnn: None,
                note,
            }
        }
        CNN => {
            let base = if config.models.cnn.reduced {
                NetworkSpec::reduced()
            } else {
                NetworkSpec::default()
            };
            let spec = NetworkSpec {
                input_len: x.n_cols(),
                ..base
            };
            let net = Network::build(spec, seed::derive(seed, "init", 0))?;
            let mut tc = TrainConfig {
                seed,
                ..config.models.cnn.train
            };
            if let Some(e) = cnn_epochs {
                tc.epochs = e;
            }
            let outcome = match val {
                Some(v) => convnet::train(net, train, v, &tc)?,
                None => {
                    let held = stratified_subsample(y, y.len() / 5, seed::derive(seed, "early-stop", 0));
                    let mut is_held = vec![false; y.len()];
                    held.iter().for_each(|&i| is_held[i] = true);
                    let kept: Vec<usize> = (0..y.len()).filter(|&i| !is_held[i]).collect();
                    let (tx, ty) = (x.select_rows(&kept), pick(y, &kept));
                    let (vx, vy) = (x.select_rows(&held), pick(y, &held));
                    convnet::train(net, (&tx, &ty), (&vx, &vy), &tc)?
                }
            };
            let note = format!(
                "epochs run {}, best epoch {}",
                outcome.history.len(),
                outcome.best_epoch
            );
            Fitted {
                model: TrainedModel::Cnn(outcome.network.clone()),
                cnn: Some(outcome),
                note,
            }
        }
        other => return Err(Error::InvalidArgument(format!("unknown model `{other}`"))),
    })
}

pub fn pick<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}
