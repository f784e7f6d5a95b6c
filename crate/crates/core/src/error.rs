//! One error type for the whole library.

/// Everything that can go wrong across the pipeline, one variant per
/// contract violation so callers can match on the failure mode.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid width: network width m must be at least 1")]
    InvalidWidth,

    #[error("lasso did not converge after {sweeps} sweeps (kkt residual {kkt:.3e})")]
    NonConvergence { sweeps: usize, kkt: f64 },

    #[error("nothing selected: the active set is empty (lower lambda)")]
    NothingSelected,

    #[error("ols infeasible: |S| = {p_l} >= n = {n} (raise lambda)")]
    OlsInfeasible { p_l: usize, n: usize },

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("unsupported kernel: the empirical tangent kernel requires relu activation")]
    UnsupportedKernel,

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("degenerate query at row {row}: every kernel weight underflowed to zero")]
    DegenerateQuery { row: usize },

    #[error("fold {fold} has {rows} rows, too few for p_L = {p_l} regressors")]
    FoldTooSmall { fold: usize, rows: usize, p_l: usize },

    #[error("nodewise regression failed at column {col}: {source}")]
    Nodewise { col: usize, source: Box<Error> },

    #[error("non-correctable: I - R is singular")]
    NonCorrectable,

    #[error("asymptotic covariance is undefined when sigma_X^2 = 0")]
    UndefinedVariance,

    #[error("empty replicate list")]
    EmptyReplicates,

    #[error("missing target column {column:?} in {path}")]
    MissingTargetColumn { column: String, path: String },

    #[error("non-numeric cell at data row {row}, column {column:?}: {value:?}")]
    NonNumericCell { row: usize, column: String, value: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
