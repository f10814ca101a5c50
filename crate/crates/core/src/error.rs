use thiserror::Error;

/// Errors raised by loss evaluation. Kept separate from [`Error`] because the
/// line search treats them as "step too long" rather than as failures.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("linear index overflow at row {row}: |x'b| = {magnitude:.3e} exceeds guard {guard}")]
    Overflow { row: usize, magnitude: f64, guard: f64 },
    #[error("non-finite loss value or gradient")]
    NonFinite,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-numeric cell in column `{column}` at data row {row}: `{value}`")]
    NonNumeric { column: String, row: usize, value: String },
    #[error("treatment not binary: column `{column}` has value {value} at data row {row}")]
    TreatmentNotBinary { column: String, row: usize, value: f64 },
    #[error("sample must contain both treated and control units (n = {n}, n1 = {n1})")]
    DegenerateTreatment { n: usize, n1: usize },
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("invalid expansion: {0}")]
    InvalidExpansion(String),
    #[error("intercept already present at column {0}")]
    InterceptPresent(usize),
    #[error("dataset has no intercept column")]
    NoIntercept,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("loading iteration {iteration}: {source}")]
    LoadingIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("singular gram matrix: rank {rank} < {dim}")]
    SingularGram { rank: usize, dim: usize },
    #[error("estimation failed: {0}")]
    Estimation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
