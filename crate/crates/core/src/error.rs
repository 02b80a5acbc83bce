use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("row {row} is not a probability distribution: {reason}")]
    InvalidDistribution { row: usize, reason: String },

    #[error("norm matrix is not symmetric positive definite: {0}")]
    InvalidNorm(String),

    #[error("reward vector is zero, augmentation factor is undefined")]
    ZeroReward,

    /// The factor denominator vanished; the instance violates the positivity hypotheses.
    #[error("degenerate instance: denominator {denominator:e} (g = {g:e}, h = {h:e}, t = {t:e})")]
    Degenerate {
        denominator: f64,
        g: f64,
        h: f64,
        t: f64,
    },

    #[error("naive mean-square error is {0:e}, relative reduction is undefined")]
    ZeroNaiveError(f64),

    #[error("bellman operator is numerically singular")]
    Singular,

    #[error("enumeration needs {outcomes:e} outcomes, limit is {limit}")]
    TooManyOutcomes { outcomes: f64, limit: u64 },

    #[error("eigenvalue computation did not converge")]
    EigenFailure,
}
