use thiserror::Error;

/// Errors raised by the numerical laboratory.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabError {
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },
    #[error("slice has {got} entries but the grid has {expected} nodes")]
    GridMismatch { expected: usize, got: usize },
    #[error("node guard exceeded: {nodes} nodes (limit {limit})")]
    NodeGuard { nodes: usize, limit: usize },
    #[error("collision operator assembly failed: {0}")]
    Assembly(String),
    #[error("coercivity lost: measured constant {0:e}")]
    Coercivity(f64),
    #[error("time step {dt:e} exceeds the stability bound {bound:e}")]
    StepGuard { dt: f64, bound: f64 },
    #[error("source is not microscopic: |P h| = {0:e}")]
    NonMicroscopicSource(f64),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("zero-mean condition violated: |int P u0 dx| = {0:e}")]
    ZeroMean(f64),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("unknown profile `{0}`")]
    UnknownProfile(String),
    #[error("Newton iteration diverged, last residual {0:e}")]
    NewtonDivergence(f64),
    #[error("blow-up detected at t = {t}: norm grew by a factor {ratio:.3}")]
    BlowUp { t: f64, ratio: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> LabError {
    LabError::InvalidArgument {
        name,
        reason: reason.into(),
    }
}
