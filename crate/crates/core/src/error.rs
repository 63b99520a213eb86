use mft_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config mismatch in fields: {}", .0.join(", "))]
    ConfigMismatch(Vec<&'static str>),
    #[error("expected {expected}x{expected} images, got {height}x{width}")]
    ImageSize {
        expected: usize,
        height: usize,
        width: usize,
    },
    #[error("mask plan is {rows}x{cols} but the batch is {batch}x{tokens}")]
    MaskShape {
        rows: usize,
        cols: usize,
        batch: usize,
        tokens: usize,
    },
    #[error("invalid prune schedule: {0}")]
    Schedule(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("distillation mode {0} needs teacher logits")]
    MissingTeacher(&'static str),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint: unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint: truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint: unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("checkpoint: tensor `{0}` missing")]
    MissingTensor(String),
    #[error("checkpoint: tensor `{name}` has shape {found:?}, config expects {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
