use thiserror::Error;

/// Errors raised by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum RpimError {
    #[error("non-finite value in {context} (row {row})")]
    NonFinite { context: String, row: usize },

    #[error("degenerate vector: norm {norm:e} is below the normalization floor")]
    DegenerateVector { norm: f64 },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite gradient for parameter `{parameter}` at index {index}")]
    NonFiniteGradient { parameter: String, index: usize },

    #[error("training diverged at epoch {epoch}: {term} is not finite")]
    Diverged { epoch: usize, term: String },

    #[error("invariant violated at epoch {epoch}: {detail}")]
    InvariantViolated { epoch: usize, detail: String },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RpimError {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        RpimError::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for failures caused by arithmetic rather than configuration or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            RpimError::NonFinite { .. }
                | RpimError::DegenerateVector { .. }
                | RpimError::NonFiniteGradient { .. }
                | RpimError::Diverged { .. }
                | RpimError::InvariantViolated { .. }
                | RpimError::Degenerate(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, RpimError>;
