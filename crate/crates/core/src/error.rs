use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced anywhere in the library.
///
/// Every variant maps onto a stable machine-readable code via [`Error::code`],
/// which the command-line driver prints alongside the human message.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{reason} ({context}, field `{field}`)")]
    Invalid {
        context: String,
        field: &'static str,
        reason: String,
    },

    #[error("power set too large: |L| = {size} exceeds cap {cap}")]
    PowerSetTooLarge { size: usize, cap: usize },

    #[error("label set is empty")]
    EmptyLabelSet,

    #[error("label set too large for exact solver: |L| = {size} exceeds cap {cap}")]
    SolverCapExceeded { size: usize, cap: usize },

    #[error("brute-force search space {size:e} exceeds bound {bound:e}")]
    SearchSpaceTooLarge { size: f64, bound: f64 },

    #[error("score tables disagree on the label set")]
    TableMismatch,

    #[error("empty bag: loss needs at least one actor")]
    EmptyBag,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty ground truth: no class has a ground-truth instance")]
    EmptyGroundTruth,

    #[error("class table mismatch: {0}")]
    ClassTableMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(
        context: impl Into<String>,
        field: &'static str,
        reason: impl Into<String>,
    ) -> Self {
        Error::Invalid {
            context: context.into(),
            field,
            reason: reason.into(),
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Error::Invalid { .. } => "E_INVALID",
            Error::PowerSetTooLarge { .. } => "E_POWERSET_CAP",
            Error::EmptyLabelSet => "E_EMPTY_LABELS",
            Error::SolverCapExceeded { .. } => "E_SOLVER_CAP",
            Error::SearchSpaceTooLarge { .. } => "E_SEARCH_SPACE",
            Error::TableMismatch => "E_TABLE_MISMATCH",
            Error::EmptyBag => "E_EMPTY_BAG",
            Error::Shape(_) => "E_SHAPE",
            Error::EmptyGroundTruth => "E_EMPTY_GT",
            Error::ClassTableMismatch(_) => "E_CLASS_TABLE",
            Error::Parse(_) => "E_PARSE",
            Error::Config(_) => "E_CONFIG",
            Error::Diverged { .. } => "E_DIVERGED",
            Error::Io(_) => "E_IO",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}
