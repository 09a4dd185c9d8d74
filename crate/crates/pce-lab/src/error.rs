use thiserror::Error;

/// Failures raised by the numerical engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PceError {
    #[error("singular covariance: {0}")]
    SingularCovariance(String),
    #[error("divergent Gaussian integral: {0}")]
    DivergentIntegral(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("assumption violated: {0}")]
    AssumptionViolated(String),
    #[error("singular payoff map: {0}")]
    SingularPayoffMap(String),
    #[error("degenerate price volatility: {0}")]
    DegenerateVolatility(String),
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("affinity check failed: {0}")]
    AffinityViolated(String),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("inconclusive: {0}")]
    Inconclusive(String),
    #[error("i/o failure: {0}")]
    Io(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<PceError>,
    },
}

impl PceError {
    pub fn at_stage(self, stage: usize) -> Self {
        match self {
            PceError::Stage { .. } => self,
            other => PceError::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }
}

impl From<std::io::Error> for PceError {
    fn from(e: std::io::Error) -> Self {
        PceError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, PceError>;
