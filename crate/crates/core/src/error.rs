use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("column `{0}` already present")]
    DuplicateColumn(String),
    #[error("non-numeric cell at data row {row}, column `{column}`")]
    NonNumericCell { row: usize, column: String },
    #[error("missing value at data row {row}, column `{column}`")]
    MissingValue { row: usize, column: String },
    #[error("target is not 0/1 at data row {row}")]
    TargetNotBinary { row: usize },
    #[error("binary column `{column}` holds {value} at data row {row}")]
    NonBinaryValue { row: usize, column: String, value: f64 },
    #[error("class {class} has only {count} samples")]
    DegenerateClass { class: u8, count: usize },
    #[error("scaler fit set is empty")]
    EmptyFitSet,
    #[error("only one class present")]
    SingleClass,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("search space is empty")]
    EmptySpace,
    #[error("class {class} has {count} members, fewer than k = {k}")]
    TooFewPerClass { k: usize, class: u8, count: usize },
    #[error("no model has validation AUC above {threshold}")]
    NoMemberQualifies { threshold: f64 },
    #[error("no probability supplied for ensemble member `{0}`")]
    MissingMember(String),
    #[error("{features} features exceeds the brute-force limit of {max}")]
    TooManyFeatures { features: usize, max: usize },
    #[error("tree node {node} has no usable cover")]
    MissingCovers { node: usize },
    #[error("explanation sample is empty")]
    EmptySample,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("vector is constant")]
    ConstantVector,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("artifact {} changed since it was produced", .0.display())]
    HashMismatch(PathBuf),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Strips any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
