use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] gasr_tensor::TensorError),
    #[error("character {0:?} is not in the vocabulary")]
    Unencodable(char),
    #[error("target of length {target} with {repeats} adjacent repeats needs at least {needed} frames, got {frames}")]
    InfeasibleTarget {
        target: usize,
        repeats: usize,
        needed: usize,
        frames: usize,
    },
    #[error("utterance too short: {frames} frames, need at least {min}")]
    TooShort { frames: usize, min: usize },
    #[error("context overflow: {len} tokens exceed the limit of {limit}")]
    ContextOverflow { len: usize, limit: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { path: String, stage: String },
    #[error("invariant breach: {0}")]
    Invariant(String),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
