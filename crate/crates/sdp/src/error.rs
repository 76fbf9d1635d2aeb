use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("malformed problem: {0}")]
    Malformed(String),
    #[error("problem too large: {total} summed block rows exceeds the budget of {budget}")]
    TooLarge { total: usize, budget: usize },
    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("numerical failure: {0}")]
    Numerical(String),
}
