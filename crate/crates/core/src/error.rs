use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("eigendecomposition does not reproduce the matrix (relative error {0:e})")]
    ReconstructionFailed(f64),

    #[error("outside metric range: kernel component {0:e} relative to the vector norm")]
    OutsideMetricRange(f64),

    #[error("singular metric")]
    SingularMetric,

    #[error("update singular: denominator {0:e}")]
    UpdateSingular(f64),

    #[error("insufficient samples for full-rank covariance: {samples} samples for {sensors} sensors")]
    InsufficientSamples { samples: usize, sensors: usize },

    #[error("sample covariance is rank deficient")]
    RankDeficientCovariance,

    #[error("source direction not identifiable")]
    NotIdentifiable,

    #[error("degenerate candidate")]
    DegenerateCandidate,

    #[error("zero data")]
    ZeroData,

    #[error("null constraint leadfield")]
    NullConstraint,

    #[error("no source")]
    NoSource,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("eLORETA iterate indefinite")]
    EloretaIndefinite,

    #[error("eLORETA weights did not converge (residual {residual:e} after {iterations} iterations)")]
    EloretaNotConverged { residual: f64, iterations: usize },

    #[error("balanced case - no construction")]
    BalancedCase,

    #[error("no witness found - invariant subspace case")]
    NoWitness,

    #[error("metric is a whitening metric (C is a positive multiple of the inverse noise covariance)")]
    WhiteningMetric,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("matrix file: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape(rows: usize, cols: usize) -> String {
    format!("{rows}x{cols}")
}
