use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown layer `{name}`; valid names: {valid}")]
    UnknownLayer { name: String, valid: String },
    #[error("missing gradient for trainable array `{0}`")]
    MissingGradient(String),
    #[error("non-finite loss at minibatch {index}")]
    Diverged { index: usize },
    #[error("batchnorm `{0}` has no running statistics")]
    UninitializedStats(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("checksum mismatch in {0}")]
    Checksum(String),
    #[error("no candidate satisfies the hard constraints; nearest misses:\n{0}")]
    NoCandidate(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable tag used as a machine-parsable prefix by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "argument",
            Error::Config(_) => "config",
            Error::UnknownLayer { .. } => "unknown-layer",
            Error::MissingGradient(_) => "missing-gradient",
            Error::Diverged { .. } => "diverged",
            Error::UninitializedStats(_) => "uninitialized-stats",
            Error::Format(_) => "format",
            Error::Checksum(_) => "checksum",
            Error::NoCandidate(_) => "no-candidate",
            Error::Context { source, .. } => source.kind(),
            Error::Io(_) => "io",
        }
    }

    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
