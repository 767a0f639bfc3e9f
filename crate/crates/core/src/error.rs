use std::fmt;

/// Failure categories. The CLI maps each one onto a distinct exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Shape,
    Numeric,
    Lookup,
    Attention,
    Format,
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Shape => 4,
            ErrorKind::Numeric => 5,
            ErrorKind::Lookup => 6,
            ErrorKind::Attention => 7,
            ErrorKind::Format => 8,
            ErrorKind::Io => 9,
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Shape => "shape",
            ErrorKind::Numeric => "numeric",
            ErrorKind::Lookup => "lookup",
            ErrorKind::Attention => "attention",
            ErrorKind::Format => "format",
            ErrorKind::Io => "io",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("attention input error: {0}")]
    Attention(String),
    /// Corrupt, truncated or mismatched artifact. `position` is a 1-based line
    /// number for text artifacts and a byte offset for binary ones.
    #[error("format error at {position}: {message}")]
    Format { position: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Data(_) => ErrorKind::Data,
            Error::Shape(_) => ErrorKind::Shape,
            Error::Numeric(_) => ErrorKind::Numeric,
            Error::Lookup(_) => ErrorKind::Lookup,
            Error::Attention(_) => ErrorKind::Attention,
            Error::Format { .. } => ErrorKind::Format,
            Error::Io(_) => ErrorKind::Io,
        }
    }

    pub(crate) fn format(position: usize, message: impl Into<String>) -> Self {
        Error::Format {
            position,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
