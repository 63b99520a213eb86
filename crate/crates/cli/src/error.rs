use mft_core::CoreError;
use thiserror::Error;

/// Machine-readable failure class printed as `error[<category>]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Usage,
    Config,
    Io,
    Data,
    Checkpoint,
    Mismatch,
    Schema,
    Runtime,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Config => "config",
            Category::Io => "io",
            Category::Data => "data",
            Category::Checkpoint => "checkpoint",
            Category::Mismatch => "mismatch",
            Category::Schema => "schema",
            Category::Runtime => "runtime",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Category::Runtime => 1,
            Category::Usage => 2,
            Category::Config => 3,
            Category::Io => 4,
            Category::Data => 5,
            Category::Checkpoint => 6,
            Category::Mismatch => 7,
            Category::Schema => 8,
        }
    }
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }

    /// One line: `error[category]: message`.
    pub fn line(&self) -> String {
        let flat = self.message.replace('\n', " ");
        format!("error[{}]: {flat}", self.category.as_str())
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let category = match &e {
            CoreError::Config(_) | CoreError::Schedule(_) | CoreError::MissingTeacher(_) => Category::Config,
            CoreError::ConfigMismatch(_) => Category::Mismatch,
            CoreError::Data(_) | CoreError::Label { .. } | CoreError::EmptyDataset | CoreError::ImageSize { .. } => {
                Category::Data
            }
            CoreError::BadMagic(_)
            | CoreError::Version { .. }
            | CoreError::Truncated(_)
            | CoreError::UnknownTensor(_)
            | CoreError::MissingTensor(_)
            | CoreError::TensorShape { .. }
            | CoreError::Json(_) => Category::Checkpoint,
            CoreError::Io(_) => Category::Io,
            CoreError::Tensor(_) | CoreError::MaskShape { .. } => Category::Runtime,
        };
        Self::new(category, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(Category::Io, e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
