use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("degenerate fit: {0}")]
    DegenerateFit(&'static str),
    #[error("no batch size calibrated near b={0}")]
    UncalibratedBatch(usize),
    #[error("speculation length {s} exceeds trace horizon {horizon}")]
    OutOfHorizon { s: usize, horizon: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("contract violation: {0}")]
    Contract(&'static str),
}
