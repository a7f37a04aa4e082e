use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] hdtree_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    /// Process exit code: 2 usage, 3 data or format, 4 numeric or training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Core(e) => match e {
                hdtree_core::Error::Contract(_) => 2,
                hdtree_core::Error::Shape(_) => 3,
                hdtree_core::Error::Training { .. } | hdtree_core::Error::Numeric(_) => 4,
            },
        }
    }
}
