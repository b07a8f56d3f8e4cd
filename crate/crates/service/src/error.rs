use hitl_core::corpus::CorpusError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown annotator `{0}`")]
    UnknownAnnotator(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("unknown dialogue `{0}`")]
    UnknownDialogue(String),
    #[error("task `{task}` is assigned to `{owner}`")]
    NotAssigned { task: String, owner: String },
    #[error("task `{task}` is a {actual} task, not a {expected} task")]
    WrongKind {
        task: String,
        expected: &'static str,
        actual: &'static str,
    },
    #[error("task `{0}` was already submitted")]
    Conflict(String),
    #[error("the highlight task for dialogue `{0}` must be submitted first")]
    OutOfOrder(String),
    #[error("{message}")]
    Invalid { field: String, message: String },
    #[error("no task has submissions from two or more annotators")]
    NoOverlap,
    #[error("submission log is corrupt at line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Core(#[from] hitl_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type ServiceResult<T> = Result<T, ServiceError>;

impl ServiceError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Stable machine-readable code for API clients.
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownAnnotator(_) => "unknown_annotator",
            Self::UnknownTask(_) => "unknown_task",
            Self::UnknownDialogue(_) => "unknown_dialogue",
            Self::NotAssigned { .. } => "not_assigned",
            Self::WrongKind { .. } => "wrong_kind",
            Self::Conflict(_) => "conflict",
            Self::OutOfOrder(_) => "out_of_order",
            Self::Invalid { .. } => "invalid",
            Self::NoOverlap => "no_overlap",
            Self::CorruptLog { .. } => "corrupt_log",
            Self::Config(_) => "config",
            Self::Corpus(_) | Self::Core(_) | Self::Io(_) | Self::Json(_) => "internal",
        }
    }

    pub fn field(&self) -> Option<&str> {
        match self {
            Self::Invalid { field, .. } => Some(field),
            _ => None,
        }
    }
}
