use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// Variants are grouped into the four categories the command-line driver
/// maps onto exit codes (see [`Error::category`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("non-finite activation in layer {layer}: {detail}")]
    NonFiniteActivation { layer: usize, detail: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("state restore mismatch: {0}")]
    RestoreMismatch(String),

    #[error("measurement error: {0}")]
    Measurement(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Internal,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Internal => 5,
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::Input(_) => {
                ErrorCategory::Data
            }
            Error::NumericDomain(_) | Error::NonFiniteActivation { .. } | Error::Diverged(_) => {
                ErrorCategory::Numeric
            }
            Error::Shape(_) | Error::RestoreMismatch(_) | Error::Measurement(_) => {
                ErrorCategory::Internal
            }
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
