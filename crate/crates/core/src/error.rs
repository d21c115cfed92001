use std::path::PathBuf;

use crate::sampler::SampleTrace;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("graph construction error: {0}")]
    Graph(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("singular model: {0}")]
    SingularModel(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("sampler did not reach the final noise level within {} iterations", .0.iterations)]
    NonConvergence(Box<SampleTrace>),

    #[error("checkpoint format version {found} is not supported (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error for {}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
