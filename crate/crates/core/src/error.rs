use thiserror::Error;

/// Errors raised while reading a `.tax` taxonomy file.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaxonomyError {
    #[error("taxonomy is empty")]
    Empty,
    #[error("line {line}: expected `root<TAB>name` header before any edge")]
    MissingRoot { line: usize },
    #[error("line {line}: second root declaration `{name}`")]
    MultipleRoots { line: usize, name: String },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate edge `{parent}` -> `{child}`")]
    DuplicateEdge {
        line: usize,
        parent: String,
        child: String,
    },
    #[error("line {line}: node `{name}` declared under a second parent")]
    DuplicateNode { line: usize, name: String },
    #[error("cycle detected through `{name}`")]
    Cycle { name: String },
    #[error("node `{name}` is used as a parent but never attached to the root")]
    DanglingParent { name: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("{what} index {index} out of range (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed field file: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Process exit code used by the CLI: 1 validation, 2 I/O, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
