use std::path::PathBuf;

/// Errors produced anywhere in the library.
///
/// Every variant carries a stable short reason (see [`Error::reason`]) that the
/// command-line front end prints as a machine-parsable prefix.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("dataset error: {0}")]
    Load(String),

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("numerical divergence: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn reason(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Load(_) => "dataset",
            Error::Mismatch(_) => "mismatch",
            Error::Usage(_) => "usage",
            Error::Generation(_) => "generation",
            Error::Numerical(_) => "divergence",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
