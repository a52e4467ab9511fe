use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("image size {height}x{width} is not a multiple of {multiple}")]
    IndivisibleInput {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("prompt {index} is invalid: {reason}")]
    InvalidPrompt { index: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("LoRA adapters are already injected")]
    AlreadyInjected,

    #[error("adapter on {0} is already merged")]
    AlreadyMerged(String),

    #[error("non-finite gradient at step {step} (parameter {param})")]
    NonFiniteGradient { step: usize, param: String },

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error("AUC undefined: target contains a single class")]
    AucUndefined,

    #[error("empty mask: prompt mode {0} needs foreground pixels")]
    EmptyMask(String),

    #[error("statistics: {0}")]
    Statistics(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidShape {
            op,
            reason: reason.into(),
        }
    }
}
