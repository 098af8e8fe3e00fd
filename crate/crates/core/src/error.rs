use thiserror::Error;

#[derive(Debug, Error)]
pub enum CgdError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CgdError {
    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            CgdError::Config(_) | CgdError::InvalidArgument(_) | CgdError::Shape(_) => 2,
            CgdError::Numeric(_) | CgdError::Graph(_) => 4,
            CgdError::Data(_) | CgdError::Format(_) | CgdError::Io(_) => 3,
        }
    }
}

pub type Result<T, E = CgdError> = std::result::Result<T, E>;
