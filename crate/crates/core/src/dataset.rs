//! Tabular ingestion, feature engineering, stratified splitting, scaling and
//! dataset summaries.
//!
//! Tables are loaded from headered CSV, reordered into schema order and
//! validated (no missing cells, binary columns hold only 0/1, binary target).
//! Feature engineering appends three derived columns. Splits and scalers are
//! plain data that serialize to TOML so runs can be replayed exactly.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

pub const BMI_CATEGORY: &str = "BMI_Category";
pub const HEALTH_RISK_SCORE: &str = "Health_Risk_Score";
pub const BMI_BP_INTERACTION: &str = "BMI_BP_Interaction";

/// Upper bounds (exclusive) of the underweight, normal and overweight BMI bands.
pub const BMI_CUTOFFS: [f64; 3] = [18.5, 25.0, 30.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Binary,
    Ordinal,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

impl ColumnSpec {
    pub fn new(name: &str, kind: ColumnKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub columns: Vec<ColumnSpec>,
    pub target: String,
}

const BRFSS_COLUMNS: [(&str, ColumnKind); 21] = [
    ("HighBP", ColumnKind::Binary),
    ("HighChol", ColumnKind::Binary),
    ("CholCheck", ColumnKind::Binary),
    ("BMI", ColumnKind::Continuous),
    ("Smoker", ColumnKind::Binary),
    ("Stroke", ColumnKind::Binary),
    ("Diabetes", ColumnKind::Ordinal),
    ("PhysActivity", ColumnKind::Binary),
    ("Fruits", ColumnKind::Binary),
    ("Veggies", ColumnKind::Binary),
    ("HvyAlcoholConsump", ColumnKind::Binary),
    ("AnyHealthcare", ColumnKind::Binary),
    ("NoDocbcCost", ColumnKind::Binary),
    ("GenHlth", ColumnKind::Ordinal),
    ("MentHlth", ColumnKind::Continuous),
    ("PhysHlth", ColumnKind::Continuous),
    ("DiffWalk", ColumnKind::Binary),
    ("Sex", ColumnKind::Binary),
    ("Age", ColumnKind::Ordinal),
    ("Education", ColumnKind::Ordinal),
    ("Income", ColumnKind::Ordinal),
];

/// Name of the extra numeric column in the default 22-feature schema.
pub const RESERVED_COLUMN: &str = "Reserved";
pub const DEFAULT_TARGET: &str = "HeartDiseaseorAttack";

impl Default for FeatureSchema {
    /// The 22-feature layout: the 21 named health indicators plus one
    /// reserved numeric column, target `HeartDiseaseorAttack`.
    fn default() -> Self {
        let mut schema = Self::brfss_public();
        schema
            .columns
            .push(ColumnSpec::new(RESERVED_COLUMN, ColumnKind::Continuous));
        schema
    }
}

impl FeatureSchema {
    /// The 21-feature layout of the public heart-disease indicator CSV.
    pub fn brfss_public() -> Self {
        Self {
            columns: BRFSS_COLUMNS
                .iter()
                .map(|(n, k)| ColumnSpec::new(n, *k))
                .collect(),
            target: DEFAULT_TARGET.to_string(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let schema: Self = toml::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::DuplicateColumn(c.name.clone()));
            }
        }
        if seen.contains(self.target.as_str()) {
            return Err(Error::DuplicateColumn(self.target.clone()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }
}

/// Feature matrix plus binary target, columns in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    pub schema: FeatureSchema,
    pub values: Matrix,
    pub target: Vec<u8>,
}

impl DataTable {
    pub fn new(schema: FeatureSchema, values: Matrix, target: Vec<u8>) -> Result<Self> {
        schema.validate()?;
        if values.n_cols() != schema.len() {
            return Err(Error::DimensionMismatch {
                expected: schema.len(),
                found: values.n_cols(),
            });
        }
        if values.n_rows() != target.len() {
            return Err(Error::DimensionMismatch {
                expected: values.n_rows(),
                found: target.len(),
            });
        }
        if let Some(row) = target.iter().position(|&t| t > 1) {
            return Err(Error::TargetNotBinary { row: row + 1 });
        }
        Ok(Self {
            schema,
            values,
            target,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.values.n_rows()
    }

    pub fn n_features(&self) -> usize {
        self.values.n_cols()
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .schema
            .index_of(name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        Ok(self.values.column(j))
    }

    pub fn select(&self, indices: &[usize]) -> DataTable {
        DataTable {
            schema: self.schema.clone(),
            values: self.values.select_rows(indices),
            target: indices.iter().map(|&i| self.target[i]).collect(),
        }
    }

    pub fn positives(&self) -> usize {
        self.target.iter().filter(|&&t| t == 1).count()
    }

    pub fn prevalence(&self) -> f64 {
        if self.target.is_empty() {
            return 0.0;
        }
        self.positives() as f64 / self.n_rows() as f64
    }

    pub fn summary(&self) -> TableSummary {
        TableSummary {
            rows: self.n_rows(),
            features: self.n_features(),
            positives: self.positives(),
            prevalence: self.prevalence(),
        }
    }

    /// Writes the table as CSV (features in schema order, then target).
    /// Floats use the shortest representation that parses back exactly.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = self.schema.names();
        header.push(self.schema.target.clone());
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for (row, t) in self.values.rows().zip(&self.target) {
            record.clear();
            record.extend(row.iter().map(|v| v.to_string()));
            record.push(t.to_string());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableSummary {
    pub rows: usize,
    pub features: usize,
    pub positives: usize,
    pub prevalence: f64,
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    let cell = raw.trim();
    if cell.is_empty() {
        return Err(Error::MissingValue {
            row,
            column: column.to_string(),
        });
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_nan() => Err(Error::MissingValue {
            row,
            column: column.to_string(),
        }),
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::NonNumericCell {
            row,
            column: column.to_string(),
        }),
    }
}

/// Loads and validates a headered CSV. Extra columns are ignored; the output
/// follows schema order. Row numbers in errors count data rows from 1.
pub fn load_table<R: Read>(source: R, schema: &FeatureSchema) -> Result<DataTable> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let position: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let lookup = |name: &str| {
        position
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let feature_pos = schema
        .columns
        .iter()
        .map(|c| lookup(&c.name))
        .collect::<Result<Vec<_>>>()?;
    let target_pos = lookup(&schema.target)?;

    let mut data = Vec::new();
    let mut target = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        for (spec, &p) in schema.columns.iter().zip(&feature_pos) {
            let v = parse_cell(record.get(p).unwrap_or(""), row, &spec.name)?;
            if spec.kind == ColumnKind::Binary && v != 0.0 && v != 1.0 {
                return Err(Error::NonBinaryValue {
                    row,
                    column: spec.name.clone(),
                    value: v,
                });
            }
            data.push(v);
        }
        let t = parse_cell(record.get(target_pos).unwrap_or(""), row, &schema.target)
            .map_err(|e| match e {
                Error::NonNumericCell { row, .. } => Error::TargetNotBinary { row },
                other => other,
            })?;
        target.push(match t {
            0.0 => 0,
            1.0 => 1,
            _ => return Err(Error::TargetNotBinary { row }),
        });
    }
    let values = Matrix::new(target.len(), schema.len(), data)?;
    DataTable::new(schema.clone(), values, target)
}

pub fn bmi_category(bmi: f64) -> f64 {
    BMI_CUTOFFS.iter().filter(|&&c| bmi >= c).count() as f64
}

/// Appends `BMI_Category`, `Health_Risk_Score` and `BMI_BP_Interaction`.
///
/// Diabetes codes above 1 count as a single indicator in the risk score.
pub fn engineer_features(table: &DataTable) -> Result<DataTable> {
    for name in [BMI_CATEGORY, HEALTH_RISK_SCORE, BMI_BP_INTERACTION] {
        if table.schema.index_of(name).is_some() {
            return Err(Error::DuplicateColumn(name.to_string()));
        }
    }
    let bmi = table.column("BMI")?;
    let high_bp = table.column("HighBP")?;
    let high_chol = table.column("HighChol")?;
    let diabetes = table.column("Diabetes")?;

    let category: Vec<f64> = bmi.iter().map(|&b| bmi_category(b)).collect();
    let risk: Vec<f64> = (0..table.n_rows())
        .map(|i| high_bp[i] + high_chol[i] + diabetes[i].clamp(0.0, 1.0))
        .collect();
    let interaction: Vec<f64> = bmi.iter().zip(&high_bp).map(|(b, bp)| b * bp).collect();

    let mut values = table.values.clone();
    let mut schema = table.schema.clone();
    for (name, kind, col) in [
        (BMI_CATEGORY, ColumnKind::Ordinal, &category),
        (HEALTH_RISK_SCORE, ColumnKind::Ordinal, &risk),
        (BMI_BP_INTERACTION, ColumnKind::Continuous, &interaction),
    ] {
        values.push_column(col)?;
        schema.columns.push(ColumnSpec::new(name, kind));
    }
    DataTable::new(schema, values, table.target.clone())
}

/// Row indices of the three partitions, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub seed: u64,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

/// `ceil(fraction * n)` without float noise pushing exact products up.
fn partition_size(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// `floor(count * positives / total + 1/2)` in exact integer arithmetic.
fn apportion(count: usize, positives: usize, total: usize) -> usize {
    let (c, p, n) = (count as u128, positives as u128, total as u128);
    ((2 * c * p + n) / (2 * n)) as usize
}

/// Stratified three-way split.
///
/// Partition sizes follow the usual convention `test = ceil(f_test * n)` and
/// `validation = ceil(f_val * (n - test))`, with training taking the rest.
/// Positives are apportioned by rounding the cumulative expected count at
/// each partition boundary, which keeps every partition within one sample per
/// class of exact proportionality. Within each class rows are shuffled with
/// the given seed before assignment.
pub fn stratified_split(
    table: &DataTable,
    test_fraction: f64,
    val_fraction_of_train: f64,
    seed: u64,
) -> Result<SplitIndices> {
    stratified_split_labels(&table.target, test_fraction, val_fraction_of_train, seed)
}

pub fn stratified_split_labels(
    labels: &[u8],
    test_fraction: f64,
    val_fraction_of_train: f64,
    seed: u64,
) -> Result<SplitIndices> {
    for (name, f) in [("test_fraction", test_fraction), ("val_fraction", val_fraction_of_train)] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1), got {f}")));
        }
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        by_class[usize::from(y == 1)].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < 3 {
            return Err(Error::DegenerateClass {
                class: class as u8,
                count: members.len(),
            });
        }
    }
    let n = labels.len();
    let positives = by_class[1].len();
    let n_test = partition_size(test_fraction, n);
    let n_val = partition_size(val_fraction_of_train, n - n_test);

    let pos_test = apportion(n_test, positives, n);
    let pos_val = apportion(n_test + n_val, positives, n) - pos_test;
    let per_class = [
        [n_test - pos_test, n_val - pos_val],
        [pos_test, pos_val],
    ];

    let mut rng = seed::derived_rng(seed, "stratified_split", 0);
    let mut split = SplitIndices {
        seed,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (class, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        let [t, v] = per_class[class];
        split.test.extend_from_slice(&members[..t]);
        split.validation.extend_from_slice(&members[t..t + v]);
        split.train.extend_from_slice(&members[t + v..]);
    }
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Stratified draw of `size` positions from `labels` (all of them when
/// `size >= labels.len()`), returned sorted.
pub fn stratified_subsample(labels: &[u8], size: usize, seed: u64) -> Vec<usize> {
    let n = labels.len();
    if size >= n {
        return (0..n).collect();
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        by_class[usize::from(y == 1)].push(i);
    }
    let pos = apportion(size, by_class[1].len(), n);
    let take = [size - pos, pos];
    let mut rng = seed::derived_rng(seed, "stratified_subsample", 0);
    let mut out = Vec::with_capacity(size);
    for (class, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..take[class]]);
    }
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub mean: f64,
    pub stddev: f64,
    pub constant: bool,
}

/// Per-column standardization parameters (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub names: Vec<String>,
    pub columns: Vec<ColumnScale>,
}

impl ScalerParams {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn transform_row(&self, row: &mut [f64]) {
        for (v, c) in row.iter_mut().zip(&self.columns) {
            if !c.constant {
                *v = (*v - c.mean) / c.stddev;
            }
        }
    }
}

/// Fits mean and population standard deviation on `fit_indices` only.
pub fn fit_scaler(table: &DataTable, fit_indices: &[usize]) -> Result<ScalerParams> {
    if fit_indices.is_empty() {
        return Err(Error::EmptyFitSet);
    }
    let n = fit_indices.len() as f64;
    let columns = (0..table.n_features())
        .map(|j| {
            let mean = fit_indices.iter().map(|&i| table.values.get(i, j)).sum::<f64>() / n;
            let var = fit_indices
                .iter()
                .map(|&i| (table.values.get(i, j) - mean).powi(2))
                .sum::<f64>()
                / n;
            let stddev = var.sqrt();
            let constant = !(stddev > 1e-12 * mean.abs().max(1.0));
            ColumnScale {
                mean,
                stddev,
                constant,
            }
        })
        .collect();
    Ok(ScalerParams {
        names: table.schema.names(),
        columns,
    })
}

pub fn apply_scaler(table: &DataTable, params: &ScalerParams) -> Result<DataTable> {
    if params.columns.len() != table.n_features() {
        return Err(Error::DimensionMismatch {
            expected: table.n_features(),
            found: params.columns.len(),
        });
    }
    let mut out = table.clone();
    for i in 0..out.n_rows() {
        params.transform_row(out.values.row_mut(i));
    }
    Ok(out)
}

/// Per-sample class weights: negatives weigh 1, positives `n_neg / n_pos`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w_pos: f64,
    pub w_neg: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights {
        w_pos: 1.0,
        w_neg: 1.0,
    };

    #[inline]
    pub fn weight(&self, label: u8) -> f64 {
        if label == 1 {
            self.w_pos
        } else {
            self.w_neg
        }
    }

    pub fn sample_weights(&self, labels: &[u8]) -> Vec<f64> {
        labels.iter().map(|&y| self.weight(y)).collect()
    }
}

pub fn compute_class_weights(target: &[u8], indices: &[usize]) -> Result<ClassWeights> {
    let pos = indices.iter().filter(|&&i| target[i] == 1).count();
    let neg = indices.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok(ClassWeights {
        w_pos: neg as f64 / pos as f64,
        w_neg: 1.0,
    })
}

/// Pearson correlation matrix of the feature columns. Constant columns get 0
/// off the diagonal; the diagonal is always 1.
pub fn correlation_matrix(table: &DataTable) -> Result<Matrix> {
    let n = table.n_rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs at least 2 rows, got {n}"
        )));
    }
    let d = table.n_features();
    let centered: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let col = table.values.column(j);
            let mean = col.iter().sum::<f64>() / n as f64;
            col.into_iter().map(|v| v - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centered
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut out = Matrix::zeros(d, d);
    for a in 0..d {
        out.set(a, a, 1.0);
        for b in (a + 1)..d {
            let r = if norms[a] > 0.0 && norms[b] > 0.0 {
                let dot: f64 = centered[a].iter().zip(&centered[b]).map(|(x, y)| x * y).sum();
                (dot / (norms[a] * norms[b])).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            out.set(a, b, r);
            out.set(b, a, r);
        }
    }
    Ok(out)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

fn categorical<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Latent risk logit (before the prevalence-matching intercept) for a row in
/// default-schema order.
fn synthetic_risk(r: &[f64]) -> f64 {
    let [high_bp, high_chol, _, bmi, smoker, stroke, diabetes, phys_activity, ..] = r[..8] else {
        unreachable!()
    };
    let gen_hlth = r[13];
    let phys_hlth = r[15];
    let diff_walk = r[16];
    let sex = r[17];
    let age = r[18];
    let older = if age >= 10.0 { 1.0 } else { 0.0 };
    0.28 * age
        + 0.9 * older
        + 0.5 * (gen_hlth - 1.0)
        + 1.7 * stroke
        + 0.6 * high_bp
        + 0.55 * high_chol
        + if diabetes >= 2.0 { 0.5 } else { 0.0 }
        + if age >= 8.0 { 0.7 * sex } else { 0.0 }
        + 0.45 * diff_walk
        + 0.35 * smoker
        + 0.03 * high_bp * (bmi - 28.0)
        - 0.3 * phys_activity
        + 0.012 * phys_hlth
}

/// Generates a table in the default 22-feature schema.
///
/// Marginals loosely follow the public survey: age bands 1..=13, BMI around
/// 28, comorbidities that rise with age and BMI, general health 1..=5 driven
/// by comorbidity burden. The target is Bernoulli with a logistic risk that
/// depends on age (with an extra step at band 10), general health, stroke,
/// blood pressure, cholesterol, diabetes, a sex-by-age interaction, a
/// BMI-by-blood-pressure interaction and a few lifestyle terms. The
/// `Reserved` column is independent noise. The intercept is solved by
/// bisection so that the mean risk equals `positive_rate` exactly.
pub fn generate_synthetic(n_rows: usize, positive_rate: f64, seed: u64) -> Result<DataTable> {
    if n_rows < 100 {
        return Err(Error::InvalidArgument(format!("n_rows must be >= 100, got {n_rows}")));
    }
    if !(0.0..=1.0).contains(&positive_rate) {
        return Err(Error::InvalidArgument(format!(
            "positive_rate must lie in [0, 1], got {positive_rate}"
        )));
    }
    let mut rng = seed::derived_rng(seed, "synthetic", 0);
    let noise: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    let age_weights = [3.0, 4.0, 5.5, 6.0, 7.0, 8.0, 10.0, 12.0, 13.0, 12.5, 9.0, 6.0, 6.5];
    let schema = FeatureSchema::default();
    let d = schema.len();
    let mut data = Vec::with_capacity(n_rows * d);
    let mut latent = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let age = (categorical(&mut rng, &age_weights) + 1) as f64;
        let sex = bernoulli(&mut rng, 0.44);
        let bmi = (28.0 + 6.0 * noise.sample(&mut rng)).clamp(12.0, 70.0).round();
        let high_bp = bernoulli(&mut rng, sigmoid(-2.7 + 0.24 * age + 0.07 * (bmi - 28.0)));
        let high_chol = bernoulli(&mut rng, sigmoid(-1.9 + 0.16 * age + 0.5 * high_bp));
        let chol_check = bernoulli(&mut rng, 0.96);
        let smoker = bernoulli(&mut rng, 0.44);
        let p_diab = sigmoid(-3.9 + 0.16 * age + 0.08 * (bmi - 28.0) + 0.6 * high_bp);
        let diabetes: f64 = match rng.random::<f64>() {
            u if u < p_diab => 2.0,
            u if u < p_diab + 0.02 => 1.0,
            _ => 0.0,
        };
        let stroke = bernoulli(&mut rng, sigmoid(-5.2 + 0.2 * age + 0.6 * high_bp));
        let phys_activity = bernoulli(&mut rng, 0.76);
        let fruits = bernoulli(&mut rng, 0.63);
        let veggies = bernoulli(&mut rng, 0.81);
        let alcohol = bernoulli(&mut rng, 0.056);
        let healthcare = bernoulli(&mut rng, 0.95);
        let no_doc = bernoulli(&mut rng, 0.084);
        let health_latent = 0.12 * age
            + 0.05 * (bmi - 28.0)
            + 0.5 * diabetes.min(1.0)
            + 0.4 * high_bp
            + 0.8 * stroke
            - 0.5 * phys_activity
            + noise.sample(&mut rng);
        let gen_hlth = (1.0 + (health_latent + 0.2).max(0.0).floor()).min(5.0);
        let ment_hlth = if rng.random::<f64>() < 0.7 {
            0.0
        } else {
            (rng.random::<f64>() * 30.0).round()
        };
        let phys_hlth = if rng.random::<f64>() < 0.8 - 0.1 * (gen_hlth - 1.0) {
            0.0
        } else {
            (rng.random::<f64>() * 30.0).round()
        };
        let diff_walk = bernoulli(&mut rng, sigmoid(-3.6 + 0.8 * (gen_hlth - 2.5) + 0.1 * age));
        let education = (categorical(&mut rng, &[1.0, 2.0, 12.0, 27.0, 28.0, 30.0]) + 1) as f64;
        let income = (categorical(&mut rng, &[4.0, 5.0, 7.0, 9.0, 11.0, 14.0, 17.0, 33.0]) + 1) as f64;
        let reserved = noise.sample(&mut rng);
        let row = [
            high_bp, high_chol, chol_check, bmi, smoker, stroke, diabetes, phys_activity, fruits,
            veggies, alcohol, healthcare, no_doc, gen_hlth, ment_hlth, phys_hlth, diff_walk, sex,
            age, education, income, reserved,
        ];
        latent.push(synthetic_risk(&row));
        data.extend_from_slice(&row);
    }

    let target: Vec<u8> = if positive_rate <= 0.0 {
        vec![0; n_rows]
    } else if positive_rate >= 1.0 {
        vec![1; n_rows]
    } else {
        let mean_risk =
            |b: f64| latent.iter().map(|&z| sigmoid(z + b)).sum::<f64>() / n_rows as f64;
        let (mut lo, mut hi) = (-60.0, 60.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mean_risk(mid) < positive_rate {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let intercept = 0.5 * (lo + hi);
        latent
            .iter()
            .map(|&z| u8::from(rng.random::<f64>() < sigmoid(z + intercept)))
            .collect()
    };
    let values = Matrix::new(n_rows, d, data)?;
    DataTable::new(schema, values, target)
}
