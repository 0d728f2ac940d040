use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("dimension {local}^{sites} exceeds the configured maximum {max}")]
    DimensionOverflow { local: usize, sites: usize, max: usize },

    #[error("matrix is not Hermitian (deviation {0:.3e})")]
    NotHermitian(f64),

    #[error("observable is not normalized (Frobenius norm {0:.12})")]
    NotNormalized(f64),

    #[error("observable is not traceless (trace {0:.3e})")]
    NotTraceless(f64),

    #[error("matrix is not unitary (deviation {0:.3e})")]
    NotUnitary(f64),

    #[error("not a valid density matrix: {0}")]
    InvalidState(String),

    #[error("invalid site {site} for a chain of {sites} sites")]
    InvalidSite { site: usize, sites: usize },

    #[error("{value} is not an eigenvalue of the operator")]
    NotAnEigenvalue { value: f64 },

    #[error("exact mode is not available for {0}")]
    ExactModeUnsupported(String),

    #[error("parallel circuits need an even number of sites, got {0}")]
    OddSites(usize),

    #[error("s = {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("insufficient grid resolution: quadrature residual {residual:.3e} exceeds {tol:.1e}")]
    InsufficientResolution { residual: f64, tol: f64 },

    #[error("design matrix is rank deficient: rank {rank} < {needed} unknowns (condition {condition:.3e})")]
    RankDeficient { rank: usize, needed: usize, condition: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
