//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not satisfy the operation's contract.
    #[error("{context}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("backward requires a scalar output, got {numel} elements")]
    NonScalarBackward { numel: usize },

    /// Loss has no labeled pixels to learn from.
    #[error("no supervision: {0}")]
    NoSupervision(String),

    /// Metric is undefined for the given inputs (e.g. empty ground truth).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("malformed {format} data: {detail}")]
    Format { format: String, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),

    #[error("csv error: {0}")]
    Csv(String),

    /// A pipeline stage failed; the stage name is preserved for diagnostics.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn shape_mismatch(
        context: impl Into<String>,
        expected: impl Into<String>,
        got: impl Into<String>,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn format(format: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            format: format.into(),
            detail: detail.into(),
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
