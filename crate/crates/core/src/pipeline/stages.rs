use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boosting::{search_gbm, BoostedModel, GbmConfig, SearchResult};
use crate::convnet::write_history_csv;
use crate::dataset::{
    self, apply_scaler, correlation_matrix, engineer_features, fit_scaler, load_table, stratified_split,
    stratified_subsample, DataTable, FeatureSchema, ScalerParams, SplitIndices, TableSummary,
};
use crate::ensemble::{optimize_weights, select_members, EnsembleSpec, StrategyReport, WeightSearch};
use crate::error::{Error, Result};
use crate::evalstats::{cross_validate, paired_bootstrap_auc, stratified_kfold, write_delta_log, BootstrapResult, CvSummary};
use crate::explain::{
    beeswarm, distill_surrogate, explain_rows, global_importance, waterfall, write_beeswarm_csv, write_importance_csv,
    write_waterfall_csv, Waterfall,
};
use crate::matrix::Matrix;
use crate::metrics::{
    classification_metrics, optimize_threshold, pearson, pr_points, roc_auc, roc_points, write_curve_csv,
    ClassificationMetrics, ThresholdChoice, ThresholdReport,
};
use crate::seed;
use crate::trees::{render, SplitConfig};

use super::artifacts::Stage;
use super::config::{Partition, PipelineConfig, ENSEMBLE, GBM_DEPTHWISE, GBM_LEAFWISE};
use super::models::{self, model_seed, TrainedModel};
use super::scores::ScoreTable;

pub const SCHEMA_PATH: &str = "prepared/schema.toml";
pub const SOURCE_SCHEMA_PATH: &str = "prepared/source_schema.toml";
pub const SPLIT_PATH: &str = "prepared/split.toml";
pub const SCALER_PATH: &str = "prepared/scaler.toml";
pub const TRAIN_PATH: &str = "prepared/train.csv";
pub const VALIDATION_PATH: &str = "prepared/validation.csv";
pub const TEST_PATH: &str = "holdout/test.csv";
pub const VALIDATION_SCORES: &str = "scores/validation.csv";
pub const FINAL_VALIDATION_SCORES: &str = "scores/validation_final.csv";
pub const TEST_SCORES: &str = "scores/test.csv";
pub const ENSEMBLE_SPEC: &str = "ensemble/spec.toml";
pub const DELTA_LOG: &str = "evaluation/bootstrap_deltas.csv";

fn to_string<F: FnOnce(&mut Vec<u8>) -> Result<()>>(f: F) -> Result<String> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

fn table_csv(t: &DataTable) -> Result<String> {
    to_string(|b| t.write_csv(b))
}

/// Picks the default 22-column layout when the header carries the reserved
/// column, the 21-column public layout otherwise.
fn detect_schema(bytes: &[u8]) -> Result<FeatureSchema> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers()?;
    if header.iter().any(|h| h.trim() == dataset::RESERVED_COLUMN) {
        Ok(FeatureSchema::default())
    } else {
        Ok(FeatureSchema::brfss_public())
    }
}

// Synth

pub fn cmd_synth(config: &PipelineConfig, path: &Path) -> Result<TableSummary> {
    let seed = seed::derive(config.seed, "synth", 0);
    let table = dataset::generate_synthetic(config.synth.rows, config.synth.positive_rate, seed)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, table_csv(&table)?)?;
    Ok(table.summary())
}

// Prepare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub source: String,
    pub source_features: usize,
    pub feature_names: Vec<String>,
    pub full: TableSummary,
    pub train: TableSummary,
    pub validation: TableSummary,
    pub test: TableSummary,
    pub split_seed: u64,
}

pub fn cmd_prepare(config: &PipelineConfig) -> Result<PrepareSummary> {
    let data = config
        .data
        .clone()
        .ok_or_else(|| Error::InvalidArgument("no data file configured; pass --data or run `synth`".into()))?;
    let mut st = Stage::begin(&config.out, "prepare", config.seed);
    let bytes = st.read_external(&data)?;
    let schema = match &config.schema {
        Some(p) => FeatureSchema::from_toml(&String::from_utf8_lossy(&st.read_external(p)?))?,
        None => detect_schema(&bytes)?,
    };
    let table = load_table(bytes.as_slice(), &schema).map_err(|e| e.context(format!("loading {}", data.display())))?;
    let source_features = table.n_features();
    let eng = engineer_features(&table)?;
    let split_seed = seed::derive(config.seed, "split", 0);
    let split = stratified_split(&eng, config.split.test_fraction, config.split.val_fraction, split_seed)?;
    let scaler = fit_scaler(&eng, &split.train)?;
    let train = eng.select(&split.train);
    let corr = correlation_matrix(&train)?;

    st.write(SOURCE_SCHEMA_PATH, toml::to_string(&schema)?)?;
    st.write(SCHEMA_PATH, toml::to_string(&eng.schema)?)?;
    st.write(SPLIT_PATH, split.to_toml()?)?;
    st.write(SCALER_PATH, scaler.to_toml()?)?;
    st.write(TRAIN_PATH, table_csv(&train)?)?;
    st.write(VALIDATION_PATH, table_csv(&eng.select(&split.validation))?)?;
    st.write(TEST_PATH, table_csv(&eng.select(&split.test))?)?;
    let names = eng.schema.names();
    st.write(
        "prepared/correlation.csv",
        to_string(|b| {
            let mut w = csv::Writer::from_writer(b);
            let mut header = vec!["feature".to_string()];
            header.extend(names.iter().cloned());
            w.write_record(&header)?;
            for (i, row) in corr.rows().enumerate() {
                let mut rec = vec![names[i].clone()];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            w.flush()?;
            Ok(())
        })?,
    )?;
    st.write("config.toml", config.to_toml()?)?;
    let summary = PrepareSummary {
        source: data.display().to_string(),
        source_features,
        feature_names: names,
        full: eng.summary(),
        train: eng.select(&split.train).summary(),
        validation: eng.select(&split.validation).summary(),
        test: eng.select(&split.test).summary(),
        split_seed,
    };
    st.write_json("prepared/summary.json", &summary)?;
    st.log(format!(
        "{} rows, prevalence {:.4}; train {} / validation {} / test {}",
        summary.full.rows, summary.full.prevalence, summary.train.rows, summary.validation.rows, summary.test.rows
    ));
    st.finish()?;
    Ok(summary)
}

struct Prepared {
    schema: FeatureSchema,
    split: SplitIndices,
    scaler: ScalerParams,
}

fn load_prepared(st: &mut Stage) -> Result<Prepared> {
    Ok(Prepared {
        schema: FeatureSchema::from_toml(&st.read(SCHEMA_PATH)?)?,
        split: SplitIndices::from_toml(&st.read(SPLIT_PATH)?)?,
        scaler: ScalerParams::from_toml(&st.read(SCALER_PATH)?)?,
    })
}

impl Prepared {
    fn table(&self, st: &mut Stage, rel: &str) -> Result<DataTable> {
        let text = st.read(rel)?;
        load_table(text.as_bytes(), &self.schema).map_err(|e| e.context(rel.to_string()))
    }

    fn scaled(&self, t: &DataTable) -> Result<Matrix> {
        Ok(apply_scaler(t, &self.scaler)?.values)
    }
}

// Train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTrainRecord {
    pub name: String,
    pub validation_auc: f64,
    pub cv: CvSummary,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub models: Vec<ModelTrainRecord>,
    pub cv_rows: usize,
    pub cv_folds: usize,
}

pub fn cmd_train(config: &PipelineConfig) -> Result<TrainSummary> {
    let mut st = Stage::begin(&config.out, "train", config.seed);
    st.require("prepare")?;
    let prep = load_prepared(&mut st)?;
    let train = prep.table(&mut st, TRAIN_PATH)?;
    let val = prep.table(&mut st, VALIDATION_PATH)?;
    let (tx, vx) = (prep.scaled(&train)?, prep.scaled(&val)?);

    let cv_rows = if config.cv.max_rows == 0 {
        (0..train.n_rows()).collect()
    } else {
        stratified_subsample(&train.target, config.cv.max_rows, seed::derive(config.seed, "cv-rows", 0))
    };
    let cv_table = train.select(&cv_rows);
    let folds = stratified_kfold(&cv_table.target, config.cv.folds, seed::derive(config.seed, "cv", 0))?;

    let mut scores = ScoreTable::new(prep.split.validation.clone(), val.target.clone());
    let mut records = Vec::new();
    for name in &config.models.roster {
        let s = model_seed(config.seed, name);
        let fitted = models::fit(config, name, (&tx, &train.target), Some((&vx, &val.target)), s, None)?;
        st.write(&format!("models/{}", models::file_name(name)), fitted.model.serialize()?)?;
        if let Some(outcome) = &fitted.cnn {
            st.write("models/cnn_history.csv", to_string(|b| write_history_csv(b, &outcome.history))?)?;
        }
        let probs = fitted.model.predict(&vx)?;
        let validation_auc = roc_auc(&probs, &val.target)?;
        scores.push(name, probs)?;

        let cv_seed = seed::derive(s, "cv", 0);
        let cv = cross_validate(&cv_table, &folds, |fold| {
            let f = models::fit(
                config,
                name,
                (fold.train_x, fold.train_y),
                None,
                seed::derive(cv_seed, "fold", fold.index as u64),
                Some(config.cv.cnn_epochs),
            )?;
            f.model.predict(fold.test_x)
        })?;
        st.log(format!(
            "{name}: validation AUC {validation_auc:.4}, CV AUC {:.4} +/- {:.4}, {}",
            cv.mean_auc, cv.std_auc, fitted.note
        ));
        records.push(ModelTrainRecord {
            name: name.clone(),
            validation_auc,
            cv,
            note: fitted.note,
        });
    }
    st.write(VALIDATION_SCORES, scores.to_csv()?)?;
    let summary = TrainSummary {
        models: records,
        cv_rows: cv_rows.len(),
        cv_folds: config.cv.folds,
    };
    st.write_json("train/summary.json", &summary)?;
    st.finish()?;
    Ok(summary)
}

// Tune

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRecord {
    pub name: String,
    pub tuned: bool,
    pub baseline_validation_auc: f64,
    pub final_validation_auc: f64,
    pub config: GbmConfig,
    pub search: Option<SearchResult<GbmConfig>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSummary {
    pub models: Vec<TuneRecord>,
}

pub fn cmd_tune(config: &PipelineConfig) -> Result<TuneSummary> {
    let mut st = Stage::begin(&config.out, "tune", config.seed);
    st.require("prepare")?;
    st.require("train")?;
    let prep = load_prepared(&mut st)?;
    let train = prep.table(&mut st, TRAIN_PATH)?;
    let val = prep.table(&mut st, VALIDATION_PATH)?;
    let (tx, vx) = (prep.scaled(&train)?, prep.scaled(&val)?);
    let mut scores = ScoreTable::from_csv(&st.read(VALIDATION_SCORES)?)?;

    let mut records = Vec::new();
    for name in [GBM_DEPTHWISE, GBM_LEAFWISE] {
        if !config.has_model(name) {
            continue;
        }
        let rel = format!("models/{}", models::file_name(name));
        let baseline = BoostedModel::from_json(&st.read(&rel)?)?;
        let baseline_auc = roc_auc(scores.get(name)?, &val.target)?;
        let (model, search) = if config.tuning.enabled {
            let space = if name == GBM_DEPTHWISE {
                &config.tuning.gbm_depthwise
            } else {
                &config.tuning.gbm_leafwise
            };
            let grid = space.configs(&baseline.config);
            let cap = (config.tuning.max_train_rows > 0).then_some(config.tuning.max_train_rows);
            let result = search_gbm(
                &grid,
                (&tx, &train.target),
                (&vx, &val.target),
                cap,
                seed::derive(config.seed, &format!("tune:{name}"), 0),
            )?;
            st.log(format!(
                "{name}: {} settings, best validation AUC {:.4} (n_estimators {}, max_depth {}, learning_rate {}, reg_alpha {})",
                grid.len(),
                result.best_score,
                result.best.n_estimators,
                result.best.max_depth,
                result.best.learning_rate,
                result.best.reg_alpha
            ));
            (crate::boosting::fit_gbm(&tx, &train.target, &result.best)?, Some(result))
        } else {
            st.log(format!("{name}: tuning disabled, keeping the trained model"));
            (baseline, None)
        };
        let probs = model.predict_matrix(&vx)?;
        let final_auc = roc_auc(&probs, &val.target)?;
        scores.push(name, probs)?;
        st.write(&format!("tuned/{}", models::file_name(name)), model.to_json()?)?;
        records.push(TuneRecord {
            name: name.to_string(),
            tuned: search.is_some(),
            baseline_validation_auc: baseline_auc,
            final_validation_auc: final_auc,
            config: model.config,
            search,
        });
    }
    st.write(FINAL_VALIDATION_SCORES, scores.to_csv()?)?;
    let summary = TuneSummary { models: records };
    st.write_json("tune/summary.json", &summary)?;
    st.finish()?;
    Ok(summary)
}

/// Where the final version of each roster model lives.
fn final_model_path(name: &str) -> String {
    if name == GBM_DEPTHWISE || name == GBM_LEAFWISE {
        format!("tuned/{}", models::file_name(name))
    } else {
        format!("models/{}", models::file_name(name))
    }
}

// Ensemble

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub candidate_aucs: Vec<(String, f64)>,
    pub members: Vec<String>,
    pub spec: EnsembleSpec,
    pub strategies: StrategyReport,
    pub validation_auc: f64,
}

pub fn cmd_ensemble(config: &PipelineConfig) -> Result<EnsembleSummary> {
    let mut st = Stage::begin(&config.out, "ensemble", config.seed);
    st.require("tune")?;
    let mut scores = ScoreTable::from_csv(&st.read(FINAL_VALIDATION_SCORES)?)?;
    let candidate_aucs = config
        .ensemble
        .candidates
        .iter()
        .map(|n| Ok((n.clone(), roc_auc(scores.get(n)?, &scores.labels)?)))
        .collect::<Result<Vec<_>>>()?;
    let members = select_members(&candidate_aucs, config.ensemble.member_threshold)?;
    let probs = members
        .iter()
        .map(|m| scores.get(m).map(<[f64]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    let (spec, strategies) = optimize_weights(
        &members,
        &probs,
        &scores.labels,
        WeightSearch {
            step: config.ensemble.step,
            include_reference_weights: config.ensemble.include_reference_weights,
        },
    )?;
    let member_probs: BTreeMap<String, Vec<f64>> = members.iter().cloned().zip(probs).collect();
    let ens = spec.predict_batch(&member_probs)?;
    let validation_auc = roc_auc(&ens, &scores.labels)?;
    scores.push(ENSEMBLE, ens)?;
    for (m, auc) in &candidate_aucs {
        st.log(format!("candidate {m}: validation AUC {auc:.4}"));
    }
    st.log(format!(
        "members {:?}, weights {:?}, validation AUC {validation_auc:.4}, margin over best member {:+.4}",
        spec.members, spec.weights, strategies.margin_over_best_member
    ));
    st.write(ENSEMBLE_SPEC, spec.to_toml()?)?;
    st.write(FINAL_VALIDATION_SCORES.replace(".csv", "_ensemble.csv").as_str(), scores.to_csv()?)?;
    let summary = EnsembleSummary {
        candidate_aucs,
        members,
        spec,
        strategies,
        validation_auc,
    };
    st.write_json("ensemble/summary.json", &summary)?;
    st.finish()?;
    Ok(summary)
}

pub const ENSEMBLE_VALIDATION_SCORES: &str = "scores/validation_final_ensemble.csv";

// Evaluate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub name: String,
    pub validation_auc: f64,
    pub test_auc: f64,
    pub at_half: ClassificationMetrics,
    pub threshold: ThresholdChoice,
    pub at_threshold: ClassificationMetrics,
    pub roc_curve: String,
    pub pr_curve: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapComparison {
    pub model_a: String,
    pub model_b: String,
    pub result: BootstrapResult,
    pub delta_log: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub models: Vec<ModelEvaluation>,
    pub correlations: Vec<(String, String, f64)>,
    pub thresholds: ThresholdReport,
    pub bootstrap: BootstrapComparison,
}

pub fn cmd_evaluate(config: &PipelineConfig) -> Result<EvaluationSummary> {
    let mut st = Stage::begin(&config.out, "evaluate", config.seed);
    st.require("prepare")?;
    st.require("tune")?;
    st.require("ensemble")?;
    let prep = load_prepared(&mut st)?;
    let test = prep.table(&mut st, TEST_PATH)?;
    let tx = prep.scaled(&test)?;
    let val_scores = ScoreTable::from_csv(&st.read(ENSEMBLE_VALIDATION_SCORES)?)?;
    let spec = EnsembleSpec::from_toml(&st.read(ENSEMBLE_SPEC)?)?;

    let mut scores = ScoreTable::new(prep.split.test.clone(), test.target.clone());
    for name in &config.models.roster {
        let text = st.read(&final_model_path(name))?;
        scores.push(name, TrainedModel::deserialize(name, &text)?.predict(&tx)?)?;
    }
    let member_probs = spec
        .members
        .iter()
        .map(|m| Ok((m.clone(), scores.get(m)?.to_vec())))
        .collect::<Result<BTreeMap<_, _>>>()?;
    scores.push(ENSEMBLE, spec.predict_batch(&member_probs)?)?;
    st.write(TEST_SCORES, scores.to_csv()?)?;

    let y = &test.target;
    let mut models = Vec::new();
    let mut thresholds = ThresholdReport::default();
    for (name, probs) in &scores.columns {
        let choice = optimize_threshold(val_scores.get(name)?, &val_scores.labels, &config.evaluation.threshold_grid)?;
        thresholds.models.push((name.clone(), choice));
        let roc_curve = format!("evaluation/curves/roc_{name}.csv");
        let pr_curve = format!("evaluation/curves/pr_{name}.csv");
        st.write(&roc_curve, to_string(|b| write_curve_csv(b, ("fpr", "tpr"), &roc_points(probs, y)?))?)?;
        st.write(&pr_curve, to_string(|b| write_curve_csv(b, ("recall", "precision"), &pr_points(probs, y)?))?)?;
        let m = ModelEvaluation {
            name: name.clone(),
            validation_auc: roc_auc(val_scores.get(name)?, &val_scores.labels)?,
            test_auc: roc_auc(probs, y)?,
            at_half: classification_metrics(probs, y, 0.5)?,
            threshold: choice,
            at_threshold: classification_metrics(probs, y, choice.threshold)?,
            roc_curve,
            pr_curve,
        };
        st.log(format!(
            "{name}: test AUC {:.4}, recall@0.5 {:.4}, precision@0.5 {:.4}, threshold {:.2}",
            m.test_auc, m.at_half.recall, m.at_half.precision, choice.threshold
        ));
        models.push(m);
    }

    let mut correlations = Vec::new();
    let roster = &config.models.roster;
    for (i, a) in roster.iter().enumerate() {
        for b in &roster[i + 1..] {
            correlations.push((a.clone(), b.clone(), pearson(scores.get(a)?, scores.get(b)?)?));
        }
    }

    // the strongest single model on validation is the comparator
    let best = models
        .iter()
        .filter(|m| m.name != ENSEMBLE)
        .fold(None::<&ModelEvaluation>, |acc, m| match acc {
            Some(b) if b.validation_auc >= m.validation_auc => Some(b),
            _ => Some(m),
        })
        .ok_or(Error::EmptySample)?
        .name
        .clone();
    let result = paired_bootstrap_auc(
        scores.get(ENSEMBLE)?,
        scores.get(&best)?,
        y,
        config.evaluation.bootstrap_iterations,
        seed::derive(config.seed, "bootstrap", 0),
    )?;
    st.write(DELTA_LOG, to_string(|b| write_delta_log(b, &result))?)?;
    st.log(format!(
        "ensemble vs {best}: delta AUC {:+.4}, p = {:.4}, 95% CI [{:+.4}, {:+.4}]",
        result.observed_delta_auc, result.p_value, result.ci_low, result.ci_high
    ));
    let summary = EvaluationSummary {
        models,
        correlations,
        thresholds,
        bootstrap: BootstrapComparison {
            model_a: ENSEMBLE.into(),
            model_b: best,
            result,
            delta_log: DELTA_LOG.into(),
        },
    };
    st.write_json("evaluation/summary.json", &summary)?;
    st.finish()?;
    Ok(summary)
}

// Explain

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaterfallCase {
    pub row: usize,
    pub path: String,
    pub waterfall: Waterfall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainSummary {
    pub model: String,
    pub sample_size: usize,
    pub max_additivity_error: f64,
    pub additivity_violations: usize,
    /// (feature, mean |contribution|), most important first.
    pub importance: Vec<(String, f64)>,
    pub importance_csv: String,
    pub beeswarm_csv: String,
    pub highest_risk: WaterfallCase,
    pub lowest_risk: WaterfallCase,
}

pub const ADDITIVITY_TOLERANCE: f64 = 1e-9;

pub fn cmd_explain(config: &PipelineConfig) -> Result<ExplainSummary> {
    let mut st = Stage::begin(&config.out, "explain", config.seed);
    st.require("prepare")?;
    st.require("tune")?;
    let prep = load_prepared(&mut st)?;
    let name = config.explain.model.clone();
    let model = BoostedModel::from_json(&st.read(&final_model_path(&name))?)?;
    let test = prep.table(&mut st, TEST_PATH)?;
    let rows: Vec<usize> = if config.explain.max_rows == 0 {
        (0..test.n_rows()).collect()
    } else {
        stratified_subsample(&test.target, config.explain.max_rows, seed::derive(config.seed, "explain-rows", 0))
    };
    let raw = test.select(&rows);
    let x = prep.scaled(&raw)?;
    let explanations = explain_rows(&model, &x)?;
    let errors: Vec<f64> = explanations.iter().map(|e| e.additivity_error().abs()).collect();
    let max_additivity_error = errors.iter().copied().fold(0.0, f64::max);
    let additivity_violations = errors.iter().filter(|&&e| !(e < ADDITIVITY_TOLERANCE)).count();
    let names = prep.schema.names();

    let imp = global_importance(&explanations)?;
    let importance_csv = "explain/importance.csv".to_string();
    let beeswarm_csv = "explain/beeswarm.csv".to_string();
    st.write(&importance_csv, to_string(|b| write_importance_csv(b, &imp, &names))?)?;
    let points = beeswarm(&explanations, &raw.values)?;
    st.write(&beeswarm_csv, to_string(|b| write_beeswarm_csv(b, &points, &names))?)?;

    let by_output = |pick_high: bool| -> usize {
        let mut best = 0;
        for (i, e) in explanations.iter().enumerate() {
            let o = e.model_output;
            let b = explanations[best].model_output;
            if (pick_high && o > b) || (!pick_high && o < b) {
                best = i;
            }
        }
        best
    };
    let mut case = |i: usize, label: &str| -> Result<WaterfallCase> {
        let wf = waterfall(&explanations[i], raw.values.row(i))?;
        let path = format!("explain/waterfall_{label}.csv");
        st.write(&path, to_string(|b| write_waterfall_csv(b, &wf, &names))?)?;
        Ok(WaterfallCase {
            row: prep.split.test[rows[i]],
            path,
            waterfall: wf,
        })
    };
    let highest_risk = case(by_output(true), "highest_risk")?;
    let lowest_risk = case(by_output(false), "lowest_risk")?;
    let importance: Vec<(String, f64)> = imp.ranking.iter().map(|&f| (names[f].clone(), imp.mean_abs[f])).collect();
    st.log(format!(
        "{} rows explained, max additivity error {max_additivity_error:e}, {additivity_violations} violations",
        rows.len()
    ));
    st.log(format!("top features: {:?}", &importance[..importance.len().min(5)]));
    let summary = ExplainSummary {
        model: name,
        sample_size: rows.len(),
        max_additivity_error,
        additivity_violations,
        importance,
        importance_csv,
        beeswarm_csv,
        highest_risk,
        lowest_risk,
    };
    st.write_json("explain/summary.json", &summary)?;
    st.finish()?;
    Ok(summary)
}

// Distill

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub teacher: String,
    pub partition: Partition,
    pub teacher_threshold: f64,
    pub scaled_features: bool,
    pub mimicry_accuracy: f64,
    pub coverage: usize,
    pub leaves: usize,
    pub depth: usize,
    pub tree_path: String,
    pub rules_path: String,
    pub teacher_scores_path: String,
}

pub fn cmd_distill(config: &PipelineConfig) -> Result<DistillSummary> {
    let mut st = Stage::begin(&config.out, "distill", config.seed);
    st.require("prepare")?;
    st.require("tune")?;
    let prep = load_prepared(&mut st)?;
    let teacher = config.distill.teacher.clone();
    let model = BoostedModel::from_json(&st.read(&final_model_path(&teacher))?)?;
    let (rel, ids) = match config.distill.partition {
        Partition::Test => (TEST_PATH, prep.split.test.clone()),
        Partition::Validation => (VALIDATION_PATH, prep.split.validation.clone()),
    };
    let table = prep.table(&mut st, rel)?;
    let scaled = prep.scaled(&table)?;
    let teacher_scores = model.predict_matrix(&scaled)?;
    let names = prep.schema.names();
    let features = if config.distill.scaled_features { &scaled } else { &table.values };
    let report = distill_surrogate(
        &teacher_scores,
        features,
        config.distill.teacher_threshold,
        &SplitConfig::with_depth(config.distill.max_depth),
        &names,
    )?;
    let mut scores = ScoreTable::new(ids, table.target.clone());
    scores.push(&teacher, teacher_scores)?;
    let summary = DistillSummary {
        teacher,
        partition: config.distill.partition,
        teacher_threshold: config.distill.teacher_threshold,
        scaled_features: config.distill.scaled_features,
        mimicry_accuracy: report.mimicry_accuracy,
        coverage: report.coverage,
        leaves: report.tree.n_leaves(),
        depth: report.tree.depth(),
        tree_path: "surrogate/tree.json".into(),
        rules_path: "surrogate/rules.txt".into(),
        teacher_scores_path: "surrogate/teacher_scores.csv".into(),
    };
    st.write(&summary.tree_path, report.tree.to_json()?)?;
    st.write(
        &summary.rules_path,
        format!("{}\n{}", render(&report.tree, &names), report.rule_listing()),
    )?;
    st.write(&summary.teacher_scores_path, scores.to_csv()?)?;
    st.write_json("surrogate/pathways.json", &report.pathways)?;
    st.log(format!(
        "depth-{} surrogate of {}: mimicry {:.4} on {} rows, {} leaves",
        config.distill.max_depth, summary.teacher, summary.mimicry_accuracy, summary.coverage, summary.leaves
    ));
    st.write_json("surrogate/summary.json", &summary)?;
    st.finish()?;
    Ok(summary)
}

// Report

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const REPORT_PATH: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    /// "baseline" for models used as trained, "tuned" after the grid search,
    /// "ensemble" for the weighted blend.
    pub phase: String,
    pub cv: Option<CvSummary>,
    pub validation_auc: f64,
    pub test_auc: f64,
    pub at_half: ClassificationMetrics,
    pub threshold: ThresholdChoice,
    pub at_threshold: ClassificationMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub seed: u64,
    pub dataset: PrepareSummary,
    pub models: Vec<ModelReport>,
    pub tuning: TuneSummary,
    pub ensemble: EnsembleSummary,
    pub correlations: Vec<(String, String, f64)>,
    pub thresholds: ThresholdReport,
    pub bootstrap: BootstrapComparison,
    pub explanation: ExplainSummary,
    pub surrogate: DistillSummary,
    /// Every stage output with its sha256.
    pub artifacts: BTreeMap<String, String>,
}

fn read_json<T: for<'de> Deserialize<'de>>(st: &mut Stage, rel: &str) -> Result<T> {
    Ok(serde_json::from_str(&st.read(rel)?)?)
}

pub const STAGES: [&str; 7] = ["prepare", "train", "tune", "ensemble", "evaluate", "explain", "distill"];

pub fn cmd_report(config: &PipelineConfig) -> Result<RunReport> {
    let mut st = Stage::begin(&config.out, "report", config.seed);
    let mut artifacts = BTreeMap::new();
    for stage in STAGES {
        artifacts.extend(st.require(stage)?.outputs);
    }
    let dataset: PrepareSummary = read_json(&mut st, "prepared/summary.json")?;
    let train: TrainSummary = read_json(&mut st, "train/summary.json")?;
    let tuning: TuneSummary = read_json(&mut st, "tune/summary.json")?;
    let ensemble: EnsembleSummary = read_json(&mut st, "ensemble/summary.json")?;
    let evaluation: EvaluationSummary = read_json(&mut st, "evaluation/summary.json")?;
    let explanation: ExplainSummary = read_json(&mut st, "explain/summary.json")?;
    let surrogate: DistillSummary = read_json(&mut st, "surrogate/summary.json")?;

    let models = evaluation
        .models
        .iter()
        .map(|m| {
            let trained = train.models.iter().find(|t| t.name == m.name);
            let tuned = tuning.models.iter().any(|t| t.name == m.name && t.tuned);
            ModelReport {
                name: m.name.clone(),
                phase: if m.name == ENSEMBLE {
                    "ensemble"
                } else if tuned {
                    "tuned"
                } else {
                    "baseline"
                }
                .into(),
                cv: trained.map(|t| t.cv.clone()),
                validation_auc: m.validation_auc,
                test_auc: m.test_auc,
                at_half: m.at_half,
                threshold: m.threshold,
                at_threshold: m.at_threshold,
            }
        })
        .collect();
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: config.seed,
        dataset,
        models,
        tuning,
        ensemble,
        correlations: evaluation.correlations,
        thresholds: evaluation.thresholds,
        bootstrap: evaluation.bootstrap,
        explanation,
        surrogate,
        artifacts,
    };
    st.write_json(REPORT_PATH, &report)?;
    st.log("report assembled");
    st.finish()?;
    Ok(report)
}

// Score

/// Scores a CSV in the source layout with the fitted ensemble and its
/// members. Writes `row,label,<member>...,ensemble` to `output`.
pub fn cmd_score(config: &PipelineConfig, input: &Path, output: &Path) -> Result<ScoreTable> {
    let mut st = Stage::begin(&config.out, "score", config.seed);
    st.require("prepare")?;
    st.require("tune")?;
    st.require("ensemble")?;
    let prep = load_prepared(&mut st)?;
    let source = FeatureSchema::from_toml(&st.read(SOURCE_SCHEMA_PATH)?)?;
    let spec = EnsembleSpec::from_toml(&st.read(ENSEMBLE_SPEC)?)?;
    let bytes = std::fs::read(input).map_err(|_| Error::MissingArtifact(input.to_path_buf()))?;
    let table = load_table(bytes.as_slice(), &source).map_err(|e| e.context(format!("loading {}", input.display())))?;
    let x = prep.scaled(&engineer_features(&table)?)?;
    let mut scores = ScoreTable::new((0..table.n_rows()).collect(), table.target.clone());
    for m in &spec.members {
        let text = st.read(&final_model_path(m))?;
        scores.push(m, TrainedModel::deserialize(m, &text)?.predict(&x)?)?;
    }
    let member_probs = scores.columns.iter().cloned().collect::<BTreeMap<_, _>>();
    scores.push(ENSEMBLE, spec.predict_batch(&member_probs)?)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(output, scores.to_csv()?)?;
    Ok(scores)
}

/// Every stage in order, generating synthetic data first when no data file
/// is configured.
pub fn run_all(config: &PipelineConfig) -> Result<RunReport> {
    let mut config = config.clone();
    if config.data.is_none() {
        let path: PathBuf = config.out.join("data/synthetic.csv");
        cmd_synth(&config, &path)?;
        config.data = Some(path);
    }
    config.validate()?;
    cmd_prepare(&config)?;
    cmd_train(&config)?;
    cmd_tune(&config)?;
    cmd_ensemble(&config)?;
    cmd_evaluate(&config)?;
    cmd_explain(&config)?;
    cmd_distill(&config)?;
    cmd_report(&config)
}
