use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The CLI maps these onto exit codes: data failures (I/O, audio, partial
/// extraction) exit 1, configuration/usage problems exit 2, numerical
/// failures (NaN, degenerate clusters) exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("audio load error: {0}")]
    AudioLoad(String),

    #[error("feature error: {0}")]
    Feature(String),

    #[error("cache error: {0}")]
    Cache(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("initialization error: {0}")]
    Init(String),

    #[error("degenerate cluster: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("partial data failure: {0}")]
    Partial(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
