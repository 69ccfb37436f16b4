use thiserror::Error;

/// Errors raised by the assembly, spectral and dynamics pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("total ion charge must be positive, got {0}")]
    NonPositiveCharge(f64),

    #[error("charge normalization violated: sigma_hat(0) = {sigma0}, e*Z = {ez}")]
    ChargeMismatch { sigma0: f64, ez: f64 },

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("theta {theta:?} lies within {dist:e} of the dual lattice (minimum {delta_min:e})")]
    ThetaOnDualLattice {
        theta: [f64; 3],
        dist: f64,
        delta_min: f64,
    },

    #[error("lattice sum not converged at radius {radius}: last shell contributes {last_shell:e}")]
    TruncationNotConverged { radius: usize, last_shell: f64 },

    #[error("jellium condition violated: |T2|_F = {0:e}")]
    JelliumViolation(f64),

    #[error("energy operator not positive: lambda_min = {0:e}")]
    EnergyNotPositive(f64),

    #[error("eigensolver failed: {0}")]
    EigFailed(String),

    #[error("fit range holds {0} points, at least 10 are required")]
    RangeTooSmall(usize),

    #[error("band {band} stencil at grid point {point} crosses a flagged band crossing")]
    CrossingContamination { band: usize, point: usize },

    #[error("cell support touches the box boundary (radius {0})")]
    BoxTooSmall(usize),

    #[error("box radius {radius} exceeds the aliasing limit L/4 for L = {l}")]
    AliasingGuard { radius: usize, l: usize },

    #[error("epsilon {epsilon:e} below the grid resolution floor {floor:e}")]
    EpsilonBelowResolution { epsilon: f64, floor: f64 },

    #[error("gauge mismatch: {0}")]
    GaugeMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
