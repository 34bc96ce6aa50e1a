use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("expected a Gevrey class, got {0}")]
    WrongKind(String),

    #[error("quadrature on [{a}, {b}] did not converge (estimated error {error:e})")]
    Quadrature { a: f64, b: f64, error: f64 },

    #[error("finite-difference step {step:e} underflows at coordinate {at:e}")]
    StepUnderflow { step: f64, at: f64 },

    #[error("derivative order {0} exceeds the supported depth of 4")]
    DerivativeDepth(usize),

    #[error("exponential weight overflows: rho={rho}, theta={theta}, xi_max={xi_max}")]
    WeightOverflow { rho: f64, theta: f64, xi_max: f64 },

    #[error("operator is not invertible: residual norm {0} >= 1")]
    NotInvertible(f64),

    #[error("time step {dt:e} exceeds the CFL bound {bound:e}")]
    Cfl { dt: f64, bound: f64 },

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("invalid constants: {0}")]
    Constants(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
