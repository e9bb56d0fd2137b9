use thiserror::Error;

/// Errors raised anywhere in the lab.
///
/// The variants map onto the failure classes the CLI distinguishes: shape,
/// data and config problems are caller errors, numeric failures come from
/// training, and contract violations mean an invariant of the pipeline broke.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(String),
}

impl LabError {
    pub fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self::Data(msg.into())
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self::Numeric(msg.into())
    }
}

impl From<std::io::Error> for LabError {
    fn from(err: std::io::Error) -> Self {
        Self::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
