use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular coupling system (|det| = {det:.3e}) for theta profile {thetas:?}")]
    SingularSystem { det: f64, thetas: Vec<f64> },

    #[error("nonpositive aggregation denominator {0:.6e}")]
    NonpositiveDenominator(f64),

    #[error("regression design matrix is rank deficient and ridge is zero")]
    RankDeficient,

    #[error("{context}: not converged after {} sweeps, residual trace {residuals:?}", residuals.len())]
    NonConvergence { context: String, residuals: Vec<f64> },

    #[error("NaN encountered at time step {step} in {context}")]
    NanEncountered { step: usize, context: String },

    #[error("fixed point diverged (ratio trace {ratios:?}); {hint}")]
    FixedPointDiverged { ratios: Vec<f64>, hint: String },

    #[error("consistency gap {gap:.3e} exceeds tolerance {tol:.3e}")]
    ConsistencyGap { gap: f64, tol: f64 },

    #[error("degenerate standard error (zero variance) in {0}")]
    DegenerateStderr(String),

    #[error("exponent clamping hit {percent:.2}% of samples, invalidating the check")]
    ExcessiveClamping { percent: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}
