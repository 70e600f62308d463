use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite values at {} position(s), first at ({}, {})",
            positions.len(), positions[0].0, positions[0].1)]
    NonFinite { positions: Vec<(usize, usize)> },

    #[error("codebook is empty after filtering")]
    EmptyCodebook,

    #[error("token {token} out of vocabulary (K = {k})")]
    OutOfVocabulary { token: u32, k: usize },

    #[error("histogram has no bins")]
    EmptyHistogram,

    #[error("entropy undefined for an empty assignment histogram")]
    UndefinedEntropy,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("zero-norm row {row}: cosine similarity undefined")]
    DegenerateSimilarity { row: usize },

    #[error("training diverged at step {step}")]
    Divergence { step: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {found}, expected {expected}")]
    BadVersion { found: u32, expected: u32 },

    #[error("truncated file: expected {expected} bytes, got {actual}")]
    Truncated { expected: u64, actual: u64 },
}

impl Error {
    /// CLI exit code: 1 usage, 2 I/O or format, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::ShapeMismatch(_)
            | Error::LengthMismatch(_)
            | Error::OutOfVocabulary { .. }
            | Error::EmptyHistogram
            | Error::EmptySequence => 1,
            Error::Io(_)
            | Error::BadMagic { .. }
            | Error::BadVersion { .. }
            | Error::Truncated { .. } => 2,
            Error::NonFinite { .. }
            | Error::EmptyCodebook
            | Error::UndefinedEntropy
            | Error::DegenerateSimilarity { .. }
            | Error::Divergence { .. } => 3,
        }
    }
}
