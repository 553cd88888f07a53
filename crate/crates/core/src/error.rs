use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid geometry in {op}: {detail}")]
    InvalidGeometry { op: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid number of classes {0} (supported: 1..=6)")]
    InvalidClasses(usize),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("policy {0} cannot be enumerated")]
    NotEnumerable(String),

    #[error("crop box ({x0}, {y0}, {w}x{h}) does not fit a {src_w}x{src_h} image")]
    InvalidBox {
        x0: usize,
        y0: usize,
        w: usize,
        h: usize,
        src_w: usize,
        src_h: usize,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("sample count must be at least {min}, got {got}")]
    TooFewSamples { min: usize, got: usize },

    #[error("checkpoint has no {0}")]
    MissingHead(&'static str),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("k = {k} out of range for corpus of {size}")]
    KOutOfRange { k: usize, size: usize },

    #[error("embedding of corpus item {0} has zero norm")]
    ZeroNorm(usize),

    #[error("invalid interpolation grid: {0}")]
    InvalidAlphas(String),

    #[error("unknown method `{0}` (expected central, tta or metta)")]
    UnknownMethod(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
