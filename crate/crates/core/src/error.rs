use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: String, reason: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
}

impl ModelError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::InvalidParam {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("infeasible bounds at index {0}: lb > ub")]
    InfeasibleBounds(usize),
    #[error("Hessian is not positive definite after regularization")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("controller mistuned: {0}")]
    Mistuned(String),
}
