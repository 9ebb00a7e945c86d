use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("number of diffusion steps must be positive")]
    ZeroSteps,

    #[error("timestep {t} outside [{min}, {max}]")]
    Timestep { t: usize, min: usize, max: usize },

    #[error("state is at timestep {found}, expected {expected}")]
    TimestepMismatch { expected: usize, found: usize },

    #[error("mask token found at position {position} of a clean sequence")]
    MaskInCleanTokens { position: usize },

    #[error("token at position {position} is neither the clean token nor the mask")]
    NotAbsorbing { position: usize },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("symbol {symbol:?} (U+{codepoint:04X}) is not in the vocabulary")]
    UnknownSymbol { symbol: String, codepoint: u32 },

    #[error("sequence of length {len} exceeds capacity {max}")]
    TooLong { len: usize, max: usize },

    #[error("example {index}: {message}")]
    BadExample { index: usize, message: String },

    #[error("line {line}: {message}")]
    Corpus { line: usize, message: String },

    #[error("list lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("outcome {0} is not in the support of the reference distribution")]
    SupportMismatch(String),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("denoiser: {0}")]
    Denoiser(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
