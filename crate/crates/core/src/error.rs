use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    Domain(String),
    /// An illuminant with no usable direction (all zero, or a vanishing channel).
    DegenerateIlluminant,
    /// An operation that needs at least one element received none.
    EmptyInput,
    /// Tensor or raster dimensions do not agree.
    Shape(String),
    /// A NaN or infinity appeared in a computed value.
    NonFinite(String),
    /// Inconsistent configuration.
    Config(String),
    /// Training diverged.
    Diverged { epoch: usize, batch: usize },
    /// Error raised inside a cascade stage.
    Stage { index: usize, source: Box<Error> },
    /// Error raised while processing a cross-validation fold.
    Fold { index: usize, source: Box<Error> },
}

impl Error {
    pub fn in_stage(self, index: usize) -> Self {
        Error::Stage { index, source: Box::new(self) }
    }

    pub fn in_fold(self, index: usize) -> Self {
        Error::Fold { index, source: Box::new(self) }
    }

    /// True when the root cause is a numeric failure (non-finite values or divergence).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::Diverged { .. } => true,
            Error::Stage { source, .. } | Error::Fold { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::DegenerateIlluminant => f.write_str("degenerate illuminant"),
            Error::EmptyInput => f.write_str("empty input"),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Diverged { epoch, batch } => {
                write!(f, "loss became non-finite at epoch {epoch}, batch {batch}")
            }
            Error::Stage { index, source } => write!(f, "stage {index}: {source}"),
            Error::Fold { index, source } => write!(f, "fold {index}: {source}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
