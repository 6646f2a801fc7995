use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynCellError {
    #[error("support mismatch: {0}")]
    SupportMismatch(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    /// Two evaluations of the same closed-form quantity disagree.
    #[error("identity violated: {what}: {a} vs {b}")]
    IdentityViolated { what: &'static str, a: f64, b: f64 },
    #[error("reaction inequality violated at component {index}: {energy} < {product}")]
    InequalityViolated { index: usize, energy: f64, product: f64 },
}

pub type Result<T> = std::result::Result<T, DynCellError>;
