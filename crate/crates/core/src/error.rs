use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("innovation covariance is numerically singular at step {step}")]
    SingularInnovation { step: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures caused by floating-point pathologies rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SingularInnovation { .. } | Error::Numerical(_) => true,
            Error::Iteration { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
