use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quaternion norm {norm:e} is too small to normalize")]
    ZeroNorm { norm: f64 },

    #[error("quaternion is not unit (norm {norm})")]
    NotUnit { norm: f64 },

    #[error("matrix is not a rotation: {reason}")]
    NotARotation { reason: String },

    #[error("expected {expected} head predictions, got {got}")]
    HeadCountMismatch { expected: usize, got: usize },

    #[error("loss is not differentiable here: {term} norm is {norm:e}")]
    NonDifferentiablePoint { term: &'static str, norm: f64 },

    #[error("function evaluated to a non-finite value at component {component}")]
    NonFiniteEvaluation { component: usize },

    #[error("dimension mismatch: model expects {expected} features, input has {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("malformed file{}: {reason}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    MalformedFile { line: Option<usize>, reason: String },

    #[error("bad quaternion at line {line}: norm {norm} outside [0.9, 1.1]")]
    BadQuaternion { line: usize, norm: f64 },

    #[error("test split is empty")]
    EmptyTestSet,

    #[error("empty input")]
    EmptyInput,

    #[error("reports differ in scene or frame count: {a} vs {b}")]
    SceneMismatch { a: String, b: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    FormatVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
}

impl Error {
    /// Numerical failures as opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. }
                | Error::NonFiniteEvaluation { .. }
                | Error::NonDifferentiablePoint { .. }
                | Error::ZeroNorm { .. }
        )
    }
}
