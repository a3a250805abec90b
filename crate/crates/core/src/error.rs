use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
///
/// Each variant maps onto one of the CLI exit-code classes through
/// [`HdlmError::exit_code`].
#[derive(Debug, Error)]
pub enum HdlmError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing column '{0}'")]
    MissingColumn(String),

    #[error("row {row}, column '{column}': cannot parse '{value}'")]
    Unparseable {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}, column '{column}': {message}")]
    SchemaViolation {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("dataset has no rows")]
    EmptyDataset,

    #[error("dataset is invalid: {}", .0.join("; "))]
    InvalidDataset(Vec<String>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("fixed-effect design is rank deficient (rank {rank} < {p} columns)")]
    RankDeficient { rank: usize, p: usize },

    #[error("numerically singular matrix ({0})")]
    Singular(&'static str),

    #[error("no valid move of this kind")]
    NoValidMove,

    #[error("subgroup predicate matches no rows")]
    EmptySubgroup,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("malformed draw file at line {line}: {message}")]
    DrawFormat { line: usize, message: String },
}

impl HdlmError {
    /// Process exit code: 3 for data problems, 4 for numerical failures,
    /// 2 for argument/config misuse.
    pub fn exit_code(&self) -> i32 {
        match self {
            HdlmError::RankDeficient { .. } | HdlmError::Singular(_) => 4,
            HdlmError::InvalidArgument(_) | HdlmError::InvalidConfig(_) => 2,
            _ => 3,
        }
    }

    /// Short machine-readable tag used in single-line CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            HdlmError::Io { .. } => "io",
            HdlmError::MissingColumn(_) => "missing-column",
            HdlmError::Unparseable { .. } => "unparseable",
            HdlmError::SchemaViolation { .. } => "schema-violation",
            HdlmError::InvalidSchema(_) => "invalid-schema",
            HdlmError::EmptyDataset => "empty-dataset",
            HdlmError::InvalidDataset(_) => "invalid-dataset",
            HdlmError::InvalidArgument(_) => "invalid-argument",
            HdlmError::InvalidConfig(_) => "invalid-config",
            HdlmError::RankDeficient { .. } => "rank-deficient",
            HdlmError::Singular(_) => "singular",
            HdlmError::NoValidMove => "no-valid-move",
            HdlmError::EmptySubgroup => "empty-subgroup",
            HdlmError::GridMismatch(_) => "grid-mismatch",
            HdlmError::DrawFormat { .. } => "draw-format",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HdlmError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HdlmError>;
