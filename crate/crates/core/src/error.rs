use thiserror::Error;

pub type Result<T> = std::result::Result<T, HlaError>;

#[derive(Debug, Error)]
pub enum HlaError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("oracle undefined under decay/ridge")]
    OracleUndefined,

    /// `t` is the zero-based token position.
    #[error("degenerate denominator at token {t}")]
    DegenerateDenominator { t: usize },

    #[error("sequence length {n} exceeds oracle cap {cap}")]
    CapExceeded { n: usize, cap: usize },

    #[error("non-finite value in input")]
    NonFinite,

    #[error("bad magic")]
    BadMagic,

    #[error("unknown dtype byte {0}")]
    BadDtype(u8),

    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    PayloadLengthMismatch { expected: usize, actual: usize },

    #[error("malformed tensor file: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HlaError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        HlaError::ShapeMismatch(msg.into())
    }
}
