use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric: max asymmetry {asymmetry:e} exceeds {limit:e}")]
    NotSymmetric { asymmetry: f64, limit: f64 },

    #[error("non-finite entry in {what}")]
    NonFinite { what: &'static str },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("eigensolver did not converge within {max_iter} sweeps (n = {n})")]
    EigenNonConvergence { n: usize, max_iter: usize },

    #[error("matrix is not positive semidefinite: shift {shift:e} exceeds cap {cap:e}")]
    NotPositiveSemidefinite { shift: f64, cap: f64 },

    #[error(
        "singular KKT matrix: rank(A) = {a_rank} of {m} rows, \
         min eigenvalue of H on null(A) = {null_space_min_eig:e}"
    )]
    SingularKkt {
        a_rank: usize,
        m: usize,
        null_space_min_eig: f64,
    },

    #[error("KKT solve residual {residual:e} exceeds {limit:e}")]
    KktResidual { residual: f64, limit: f64 },

    #[error("invalid problem: {0}")]
    Validation(String),

    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("curvature unavailable: {0}")]
    Curvature(String),

    #[error("metric selection infeasible: {0}")]
    Infeasible(String),

    #[error("SDP solver did not converge: {reason}")]
    SdpNonConvergence { reason: String },

    #[error("SDP has {vars} variables, above the cap of {cap}")]
    SdpTooLarge { vars: usize, cap: usize },

    #[error("unsupported prox: {0}")]
    UnsupportedProx(String),

    #[error("no closed-form inner minimizer: {0}")]
    UnsupportedInner(String),

    #[error("metric does not certify L ⪰ C P Cᵀ (margin {margin:e}); pass allow_uncertified to override")]
    RefusedUncertifiedMetric { margin: f64 },

    #[error("iteration cap of {iterations} reached before the stopping rule held")]
    CapReached { iterations: usize },

    #[error("reference solver failed: {0}")]
    Reference(String),
}
