use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("zeta = {zeta} outside the admissible range (0, {zeta_crit})")]
    ZetaOutOfRange { zeta: f64, zeta_crit: f64 },
    #[error("local zeta = {zeta} at x = {x:?}, t = {t} exceeds the critical value {zeta_crit}")]
    UnsolvableZeta { zeta: f64, zeta_crit: f64, x: [f64; 3], t: f64 },
    #[error("transition solve did not converge for zeta = {zeta} (residual {residual:e})")]
    ConvergenceFailure { zeta: f64, residual: f64 },
    #[error("degenerate spectrum constants: {0}")]
    DegenerateConstants(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-positive {field} = {value} at sample {index}")]
    NonPositiveField { field: &'static str, value: f64, index: usize },
    #[error("point x = {x:?}, t = {t} lies outside the flow domain")]
    OutOfDomain { x: [f64; 3], t: f64 },
    #[error("Reynolds stress is not realizable: {0}")]
    NotRealizable(String),
    #[error("operation requires a {expected} realization")]
    VariantMismatch { expected: &'static str },
    #[error("correlogram still above noise level at horizon {horizon}")]
    HorizonTooShort { horizon: f64 },
    #[error("grid file: {0}")]
    GridFormat(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
