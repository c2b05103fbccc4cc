use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DoseError {
    #[error("invalid trial configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("degenerate geometry: eta is within {tol:e} of x_min")]
    DegenerateGeometry { tol: f64 },
    #[error("zero slope: |beta| = {beta:e} is below tolerance")]
    ZeroSlope { beta: f64 },
    #[error("posterior weights underflowed at every grid node")]
    AllZeroWeight,
    #[error("grid resolution {m_rho}x{m_eta} is below the 16x16 minimum")]
    ResolutionTooSmall { m_rho: usize, m_eta: usize },
    #[error("rejection sampler acceptance rate {rate:e} fell below 1e-4")]
    EnvelopeFailure { rate: f64 },
    #[error("invalid cohort toxicity count {0} (expected 0..=3)")]
    InvalidCohortCount(u32),
    #[error("trial was stopped; no further doses can be assigned")]
    StoppedTrial,
    #[error("underdetermined fit in block {block}: fewer than 2 distinct s values")]
    UnderdeterminedFit { block: usize },
    #[error("dose {dose} outside [{lo}, {hi}]")]
    DoseOutOfRange { dose: f64, lo: f64, hi: f64 },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, DoseError>;
