use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("division by zero")]
    DivisionByZero,
    #[error("square root of a nonpositive element")]
    NonPositiveSqrt,
    #[error("infinite element has no standard part")]
    NoStandardPart,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("wavefunctions live on different grids")]
    GridMismatch,
    #[error("psi already has full support")]
    FullSupport,
    #[error("envelope underflows to zero on part of the zero set (nearest x = {x})")]
    EnvelopeUnderflow { x: f64 },
    #[error("velocity undefined at node x = {x} (t = {t})")]
    Node { t: f64, x: f64 },
    #[error("x0 = {x0} is outside the support of psi")]
    OutsideSupport { x0: f64 },
}
