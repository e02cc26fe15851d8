use std::path::PathBuf;

/// Failures of the file-facing layer, on top of the core crate's errors.
#[derive(Debug, thiserror::Error)]
pub enum C4Error {
    #[error(transparent)]
    Core(#[from] c4_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{}:{line}: {message}", path.display())]
    Line {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = C4Error> = std::result::Result<T, E>;

impl C4Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit status for this failure: 1 usage, 2 data or format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Core(e) if e.is_numeric() => 3,
            _ => 2,
        }
    }
}
