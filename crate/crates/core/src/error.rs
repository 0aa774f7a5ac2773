use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("wrong data kind: {0}")]
    WrongKind(String),

    #[error("iteration {iteration}, updating {parameter}: {source}")]
    Chain {
        iteration: usize,
        parameter: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures that come from the numerical linear algebra rather
    /// than from invalid input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Numerical(_) => true,
            Error::Chain { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
