use thiserror::Error;

pub type Result<T> = std::result::Result<T, AsrError>;

#[derive(Debug, Error)]
pub enum AsrError {
    /// Input rejected before any computation ran.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("transition matrix is not stable (spectral radius {spectral_radius:.6} >= 1)")]
    NonStationary { spectral_radius: f64 },

    #[error("unknown node {0} in unrolled network")]
    UnknownNode(String),

    #[error("identifiability failure ({assumption}): {detail}")]
    Identifiability {
        assumption: &'static str,
        detail: String,
    },

    #[error("singular matrix in {0}")]
    Singular(String),

    #[error("non-finite value in objective term `{term}`")]
    NonFinite { term: &'static str },

    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("Q values diverged (|Q| = {magnitude:e}) at real step {step}")]
    QDivergence { magnitude: f64, step: usize },

    #[error("unknown benchmark `{0}`")]
    UnknownBenchmark(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<AsrError>,
    },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AsrError {
    /// Errors caused by malformed or inconsistent user input, as opposed to
    /// failures that happen while running a numerical stage.
    pub fn is_validation(&self) -> bool {
        match self {
            AsrError::InvalidInput(_)
            | AsrError::DimensionMismatch { .. }
            | AsrError::NonStationary { .. }
            | AsrError::UnknownNode(_)
            | AsrError::UnknownBenchmark(_)
            | AsrError::Parse { .. }
            | AsrError::Json(_) => true,
            AsrError::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        AsrError::InvalidInput(msg.into())
    }
}
