use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("corrupt pooling indices: {0}")]
    Corruption(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("singular active Gram matrix for active set {active:?}")]
    SingularGram { active: Vec<usize> },

    #[error("VAR fit failed: {0}")]
    Fit(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("missing config key `{0}`")]
    MissingKey(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
