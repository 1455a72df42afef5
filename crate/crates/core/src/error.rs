use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum TadaError {
    #[error("dimension error in `{op}`: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("training error at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("verification error: {0}")]
    Verification(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("model file error: {0}")]
    ModelFile(String),

    #[error("export error: {0}")]
    Export(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl TadaError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        TadaError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures of the numerics themselves (divergence, NaN gradients)
    /// as opposed to bad inputs or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TadaError::Training { .. } | TadaError::NonFiniteGradient { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, TadaError>;
