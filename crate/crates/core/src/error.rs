use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("heralding is impossible with these parameters")]
    HeraldImpossible,
    #[error("heralding probability {0:e} is below the floor")]
    HeraldUnderflow(f64),
    #[error("probability {value:e} at {cell} is inconsistent")]
    Inconsistent { cell: String, value: f64 },
    #[error("Fock truncation leaked {leaked:e} of the norm (tolerance {tolerance:e})")]
    Truncation { leaked: f64, tolerance: f64 },
    #[error("behavior lies outside the relaxed quantum set")]
    Infeasible,
    #[error("SDP solver failed: {0}")]
    Solver(String),
    #[error("optimizer failed: {0}")]
    Optimizer(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
