use thiserror::Error;

/// Errors raised by the simulation and estimation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("duplicate point insertion at {0:?}")]
    DuplicatePoint(Vec<f64>),

    #[error("no particle with id {0}")]
    MissingParticle(usize),

    #[error("query radius {radius} exceeds half the box side {half_side}")]
    RadiusTooLarge { radius: f64, half_side: f64 },

    #[error("kernel range {range} / eps {eps} exceeds half the box side {half_side}")]
    InadmissibleEps { eps: f64, range: f64, half_side: f64 },

    #[error("order {0} exceeds the supported maximum of 6")]
    OrderTooLarge(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("stability falsified: pair energy {pair_energy} < -B|γ| = {bound} for |γ| = {n}")]
    StabilityFalsified { pair_energy: f64, bound: f64, n: usize },

    #[error("unbounded integrand: {0}")]
    UnboundedIntegrand(String),

    #[error("unknown term `{0}`")]
    UnknownTerm(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
