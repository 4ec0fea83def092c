use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{ForestConfig, LogisticConfig};
use crate::boosting::{GbmConfig, GbmSpace};
use crate::convnet::TrainConfig;
use crate::ensemble::{DEFAULT_MEMBER_THRESHOLD, DEFAULT_STEP};
use crate::error::{Error, Result};
use crate::metrics::default_threshold_grid;

pub const LOGISTIC: &str = "logistic";
pub const RANDOM_FOREST: &str = "random_forest";
pub const GBM_DEPTHWISE: &str = "gbm_depthwise";
pub const GBM_LEAFWISE: &str = "gbm_leafwise";
pub const CNN: &str = "cnn";
pub const ENSEMBLE: &str = "ensemble";

pub const ALL_MODELS: [&str; 5] = [LOGISTIC, RANDOM_FOREST, GBM_DEPTHWISE, GBM_LEAFWISE, CNN];

/// Full run configuration. Only `seed` is required; every other key has a
/// default. Seeds inside model sections are ignored: each model gets a seed
/// derived from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Input CSV. When absent, `run` generates a synthetic table first.
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Schema TOML. When absent the layout is detected from the CSV header.
    #[serde(default)]
    pub schema: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub synth: SynthSettings,
    #[serde(default)]
    pub split: SplitSettings,
    #[serde(default)]
    pub cv: CvSettings,
    #[serde(default)]
    pub models: ModelSettings,
    #[serde(default)]
    pub tuning: TuningSettings,
    #[serde(default)]
    pub ensemble: EnsembleSettings,
    #[serde(default)]
    pub evaluation: EvaluationSettings,
    #[serde(default)]
    pub explain: ExplainSettings,
    #[serde(default)]
    pub distill: DistillSettings,
}

fn default_out() -> PathBuf {
    PathBuf::from("heartscreen-run")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub rows: usize,
    pub positive_rate: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            rows: 20_000,
            positive_rate: 0.103,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSettings {
    pub folds: usize,
    /// Stratified subsample of the training partition used for CV; 0 = all.
    pub max_rows: usize,
    /// Epoch budget of the network inside each fold.
    pub cnn_epochs: usize,
}

impl Default for CvSettings {
    fn default() -> Self {
        Self {
            folds: 5,
            max_rows: 5_000,
            cnn_epochs: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnSettings {
    /// 8/16 filters instead of 32/64.
    pub reduced: bool,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub roster: Vec<String>,
    pub logistic: LogisticConfig,
    pub random_forest: ForestConfig,
    pub gbm_depthwise: GbmConfig,
    pub gbm_leafwise: GbmConfig,
    pub cnn: CnnSettings,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            roster: ALL_MODELS.iter().map(|s| s.to_string()).collect(),
            logistic: LogisticConfig::default(),
            random_forest: ForestConfig::default(),
            gbm_depthwise: GbmConfig::depthwise_role(0),
            gbm_leafwise: GbmConfig::leafwise_role(0),
            cnn: CnnSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningSettings {
    pub enabled: bool,
    /// Stratified training subsample for the search; 0 = all rows.
    pub max_train_rows: usize,
    pub gbm_depthwise: GbmSpace,
    pub gbm_leafwise: GbmSpace,
}

impl Default for TuningSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            max_train_rows: 50_000,
            gbm_depthwise: GbmSpace::depthwise_role(),
            gbm_leafwise: GbmSpace::leafwise_role(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSettings {
    pub candidates: Vec<String>,
    pub member_threshold: f64,
    pub step: f64,
    pub include_reference_weights: bool,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        Self {
            candidates: vec![GBM_LEAFWISE.into(), GBM_DEPTHWISE.into(), CNN.into()],
            member_threshold: DEFAULT_MEMBER_THRESHOLD,
            step: DEFAULT_STEP,
            include_reference_weights: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    pub bootstrap_iterations: usize,
    pub threshold_grid: Vec<f64>,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            bootstrap_iterations: 1000,
            threshold_grid: default_threshold_grid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSettings {
    pub model: String,
    /// Cap on explained test rows (stratified subsample); 0 = all.
    pub max_rows: usize,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        Self {
            model: GBM_LEAFWISE.into(),
            max_rows: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSettings {
    pub teacher: String,
    pub partition: Partition,
    pub max_depth: usize,
    pub teacher_threshold: f64,
    /// Fit on standardized features (thresholds in z-score units) rather
    /// than the raw engineered values.
    pub scaled_features: bool,
}

impl Default for DistillSettings {
    fn default() -> Self {
        Self {
            teacher: GBM_LEAFWISE.into(),
            partition: Partition::Test,
            max_depth: 4,
            teacher_threshold: 0.5,
            scaled_features: true,
        }
    }
}

impl PipelineConfig {
    /// Defaults everywhere except the seed.
    pub fn with_seed(seed: u64) -> Self {
        toml::from_str(&format!("seed = {seed}")).expect("seed-only config parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::from(e).context(format!("reading config {}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for name in &self.models.roster {
            if !ALL_MODELS.contains(&name.as_str()) {
                return bad(format!("unknown model `{name}` in roster"));
            }
        }
        for name in self.ensemble.candidates.iter().chain([&self.explain.model, &self.distill.teacher]) {
            if !self.models.roster.contains(name) {
                return bad(format!("model `{name}` is not in the roster"));
            }
        }
        for name in [&self.explain.model, &self.distill.teacher] {
            if name != GBM_DEPTHWISE && name != GBM_LEAFWISE {
                return bad(format!("`{name}` is not a boosted tree model"));
            }
        }
        if self.cv.folds < 2 {
            return bad("cv.folds must be >= 2".into());
        }
        if self.evaluation.bootstrap_iterations == 0 {
            return bad("evaluation.bootstrap_iterations must be >= 1".into());
        }
        if self.evaluation.threshold_grid.is_empty() {
            return bad("evaluation.threshold_grid is empty".into());
        }
        self.models.gbm_depthwise.validate()?;
        self.models.gbm_leafwise.validate()?;
        self.models.cnn.train.validate()?;
        Ok(())
    }

    pub fn has_model(&self, name: &str) -> bool {
        self.models.roster.iter().any(|m| m == name)
    }
}
