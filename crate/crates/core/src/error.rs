//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("zero evidence: every category has zero posterior mass")]
    ZeroEvidence,

    #[error("unknown region key `{0}`")]
    UnknownRegion(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("label vectors differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },

    #[error("category {0} has no observations")]
    EmptyCategory(usize),

    #[error("true class {0} has zero count")]
    EmptyTrueClass(usize),

    #[error("predicted class {0} has zero count")]
    EmptyPredictedClass(usize),

    #[error("expected count of predicted class {0} is not positive")]
    EmptyExpectedClass(usize),

    #[error("design matrix is rank deficient (columns {columns:?})")]
    RankDeficient { columns: Vec<usize> },

    #[error("column {column} of the confusion matrix sums to {sum}, not 1")]
    NotColumnStochastic { column: usize, sum: f64 },

    #[error("invalid probability table entry for `{key}`: {reason}")]
    InvalidTable { key: String, reason: String },

    #[error("category index {index} out of range for {len} categories")]
    CategoryOutOfRange { index: usize, len: usize },

    #[error("invalid category set: {0}")]
    InvalidCategories(String),

    #[error("invalid configuration field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("race {race} has only {cells} cells (need at least {needed})")]
    TooFewCells { race: usize, cells: usize, needed: usize },

    #[error("misaligned inputs: {0}")]
    Alignment(String),

    #[error("{source_name}:{line}: {message}")]
    Parse { source_name: String, line: usize, message: String },

    #[error("label mismatch: expected {expected:?}, found {found:?}")]
    LabelMismatch { expected: Vec<String>, found: Vec<String> },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// True for failures of the numerics (singular designs, empty evidence) as
    /// opposed to malformed or inconsistent inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::ZeroEvidence
                | Error::RankDeficient { .. }
                | Error::EmptyExpectedClass(_)
                | Error::EmptyPredictedClass(_)
        )
    }

    pub(crate) fn parse(source_name: &str, line: usize, message: impl Into<String>) -> Self {
        Error::Parse { source_name: source_name.to_string(), line, message: message.into() }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        Error::Parse { source_name: "csv".to_string(), line, message: e.to_string() }
    }
}
